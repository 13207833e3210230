import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from trackverify.features import (
    SINUSOID_DIM,
    FeatureExtractor,
    ModelConfig,
    _gather_bilinear,
    bilinear_sample,
    build_descriptors,
    sinusoidal_embedding,
)
from trackverify.perturb import PerturbationConfig, generate_candidates
from trackverify.trajectory import CandidateSet, QueryPoint
from trackverify.world import VideoFeatureProvider, WorldConfig, generate_video, ground_truth_tracks

SMALL_CFG = ModelConfig(d_raw=6, d_model=16, n_heads=4, n_points=3,
                        n_deform_layers=2, d_id=4, dropout=0.0)


def make_extractor(cfg=SMALL_CFG, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return FeatureExtractor(cfg).to(dtype)


# --- bilinear sampling ---------------------------------------------------------


def test_bilinear_sample_hand_values():
    grid = np.array([[[1.0], [2.0]],
                     [[3.0], [4.0]]])  # (H=2, W=2, C=1)
    assert bilinear_sample(grid, (0.0, 0.0))[0] == 1.0
    assert bilinear_sample(grid, (1.0, 0.0))[0] == 2.0
    assert bilinear_sample(grid, (0.0, 1.0))[0] == 3.0
    assert bilinear_sample(grid, (0.5, 0.0))[0] == pytest.approx(1.5)
    assert bilinear_sample(grid, (0.5, 0.5))[0] == pytest.approx(2.5)  # mean of all four
    assert bilinear_sample(grid, (0.25, 0.0))[0] == pytest.approx(1.25)


def test_bilinear_sample_clamps_out_of_bounds():
    grid = np.arange(12, dtype=np.float64).reshape(3, 4, 1)
    np.testing.assert_array_equal(
        bilinear_sample(grid, (-5.0, -5.0)), bilinear_sample(grid, (0.0, 0.0))
    )
    np.testing.assert_array_equal(
        bilinear_sample(grid, (100.0, 100.0)), bilinear_sample(grid, (3.0, 2.0))
    )


def test_bilinear_sample_exact_at_integer_positions():
    rng = np.random.default_rng(0)
    grid = rng.normal(size=(5, 7, 3))
    for y in range(5):
        for x in range(7):
            np.testing.assert_array_equal(bilinear_sample(grid, (x, y)), grid[y, x])


@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 10**6),
    st.floats(-3.0, 10.0),
    st.floats(-3.0, 8.0),
)
def test_torch_gather_matches_numpy_reference(seed, x, y):
    rng = np.random.default_rng(seed)
    grid = rng.normal(size=(5, 7, 4))
    expected = bilinear_sample(grid, (x, y))
    flat = torch.from_numpy(grid.reshape(1, 35, 4))
    pos = torch.tensor([[[x, y]]], dtype=torch.float64)
    frame = torch.zeros((1, 1), dtype=torch.long)
    got = _gather_bilinear(flat, 5, 7, frame, pos)[0, 0]
    np.testing.assert_allclose(got.numpy(), expected, rtol=0, atol=1e-12)


def test_gather_bilinear_selects_the_right_frame():
    f0 = np.zeros((2, 2, 1))
    f1 = np.ones((2, 2, 1))
    flat = torch.from_numpy(np.stack([f0, f1]).reshape(1, 8, 1))
    pos = torch.tensor([[[0.5, 0.5], [0.5, 0.5]]], dtype=torch.float64)
    frames = torch.tensor([[0, 1]])
    out = _gather_bilinear(flat, 2, 2, frames, pos)
    np.testing.assert_array_equal(out[0, :, 0].numpy(), [0.0, 1.0])


def test_gather_bilinear_position_gradients():
    # d/dx of a linear-in-x grid is the x slope wherever sampling is interior
    grid = torch.arange(4, dtype=torch.float64).reshape(1, 4, 1) * 3.0  # (1, W=4, C=1) at H=1
    flat = grid.reshape(1, 4, 1)
    pos = torch.tensor([[[1.25, 0.0]]], dtype=torch.float64, requires_grad=True)
    frame = torch.zeros((1, 1), dtype=torch.long)
    out = _gather_bilinear(flat, 1, 4, frame, pos)
    out.sum().backward()
    assert pos.grad[0, 0, 0].item() == pytest.approx(3.0)
    assert pos.grad[0, 0, 1].item() == pytest.approx(0.0)


# --- sinusoidal embedding -------------------------------------------------------


def test_sinusoidal_embedding_structure():
    emb = sinusoidal_embedding(torch.zeros(2))
    assert emb.shape == (SINUSOID_DIM,)
    # interleaved sin/cos of zero angles: 0, 1, 0, 1, ...
    np.testing.assert_array_equal(emb.numpy(), np.tile([0.0, 1.0], SINUSOID_DIM // 2))

    xy = torch.tensor([1.5, -2.0], dtype=torch.float64)
    emb = sinusoidal_embedding(xy)
    half = SINUSOID_DIM // 2
    for k in range(8):
        freq = 10000.0 ** (-k / 8)
        assert emb[2 * k].item() == pytest.approx(math.sin(1.5 * freq), abs=1e-12)
        assert emb[2 * k + 1].item() == pytest.approx(math.cos(1.5 * freq), abs=1e-12)
        assert emb[half + 2 * k].item() == pytest.approx(math.sin(-2.0 * freq), abs=1e-12)
        assert emb[half + 2 * k + 1].item() == pytest.approx(math.cos(-2.0 * freq), abs=1e-12)


def test_sinusoidal_embedding_batches():
    xy = torch.zeros(3, 5, 2)
    assert sinusoidal_embedding(xy).shape == (3, 5, SINUSOID_DIM)


# --- deformable attention -------------------------------------------------------


def test_fresh_layers_reduce_to_plain_bilinear_sampling():
    # Zero-initialized offset/weight predictors sample P copies of the center,
    # so each layer is out_proj(value_proj(grid(center))) regardless of depth.
    extractor = make_extractor()
    h, w, d = 9, 11, SMALL_CFG.d_model
    rng = np.random.default_rng(1)
    grid_np = rng.normal(size=(h, w, d))
    grid = torch.from_numpy(grid_np)
    centers = torch.tensor([[2.25, 3.5], [7.0, 1.75], [50.0, -3.0]], dtype=torch.float64)
    reference = torch.zeros(d, dtype=torch.float64)
    got = extractor.deformable_local_attend(reference, grid, centers)

    layer = extractor.deform_layers[-1]
    for i, center in enumerate(centers):
        feat = torch.from_numpy(bilinear_sample(grid_np, center.numpy()))
        expected = layer.out_proj(layer.value_proj(feat))
        np.testing.assert_allclose(got[i].detach().numpy(),
                                   expected.detach().numpy(), atol=1e-12)


def test_contract_and_fast_paths_agree():
    extractor = make_extractor(seed=3)
    # random weights so offsets/weights are no longer degenerate
    with torch.no_grad():
        for layer in extractor.deform_layers:
            layer.offset_pred.weight.normal_(0, 0.5)
            layer.offset_pred.bias.normal_(0, 0.5)
            layer.weight_pred.weight.normal_(0, 0.5)
            layer.weight_pred.bias.normal_(0, 0.5)
    h, w = 8, 10
    rng = np.random.default_rng(7)
    raw = rng.normal(size=(h, w, SMALL_CFG.d_raw))
    centers_np = rng.uniform(0, 7, size=(4, 2))

    raw_t = torch.from_numpy(raw)
    projected = extractor.input_proj(raw_t)  # (H, W, D)
    query_pos = np.array([3.3, 4.1])
    ref0 = extractor.input_proj(torch.from_numpy(bilinear_sample(raw, query_pos)))

    contract = extractor.deformable_local_attend(
        ref0, projected, torch.from_numpy(centers_np)
    )
    fast = extractor._deform_fast(
        raw_t.reshape(1, 1, h, w, SMALL_CFG.d_raw),
        torch.from_numpy(centers_np).reshape(1, 4, 2),
        torch.zeros((1, 4), dtype=torch.long),
        ref0.reshape(1, -1),
    )[0]
    np.testing.assert_allclose(contract.detach().numpy(), fast.detach().numpy(),
                               atol=1e-10)


def test_deformable_rejects_wrong_grid_width():
    extractor = make_extractor()
    with pytest.raises(ValueError, match="d_model"):
        extractor.deformable_local_attend(
            torch.zeros(SMALL_CFG.d_model, dtype=torch.float64),
            torch.zeros(4, 4, 3, dtype=torch.float64),
            torch.zeros(1, 2, dtype=torch.float64),
        )


# --- descriptors ----------------------------------------------------------------


def small_batch(seed=0, b=2, l=3, m=4, h=8, w=8):
    rng = np.random.default_rng(seed)
    grids = torch.from_numpy(rng.normal(size=(b, l, h, w, SMALL_CFG.d_raw)))
    query_pos = torch.from_numpy(rng.uniform(1, 6, size=(b, 2)))
    centers = torch.from_numpy(rng.uniform(0, 7, size=(b, l, m, 2)))
    return grids, query_pos, centers


def test_descriptor_shapes_and_replicated_query_rows():
    torch.manual_seed(0)
    extractor = make_extractor()
    grids, query_pos, centers = small_batch()
    f_q, f_c = extractor.descriptors(grids, query_pos, centers)
    assert f_q.shape == (2, 3, SMALL_CFG.d_model)
    assert f_c.shape == (2, 3, 4, SMALL_CFG.d_model)
    # the query descriptor is computed once at the query frame and replicated
    np.testing.assert_array_equal(f_q[:, 0].detach().numpy(), f_q[:, 1].detach().numpy())
    np.testing.assert_array_equal(f_q[:, 0].detach().numpy(), f_q[:, 2].detach().numpy())


def test_descriptors_are_candidate_permutation_equivariant():
    extractor = make_extractor(seed=5)
    grids, query_pos, centers = small_batch(seed=2)
    perm = torch.tensor([2, 0, 3, 1])
    _, f_c = extractor.descriptors(grids, query_pos, centers)
    _, f_c_perm = extractor.descriptors(grids, query_pos, centers[:, :, perm])
    np.testing.assert_allclose(
        f_c_perm.detach().numpy(), f_c[:, :, perm].detach().numpy(), atol=1e-12
    )


def test_descriptors_depend_only_on_own_frame():
    extractor = make_extractor(seed=6)
    grids, query_pos, centers = small_batch(seed=3)
    f_q, f_c = extractor.descriptors(grids, query_pos, centers)
    bumped = grids.clone()
    bumped[:, 2] += 1.0
    g_q, g_c = extractor.descriptors(bumped, query_pos, centers)
    np.testing.assert_array_equal(f_q.detach().numpy(), g_q.detach().numpy())
    np.testing.assert_array_equal(f_c[:, :2].detach().numpy(), g_c[:, :2].detach().numpy())
    assert not np.allclose(f_c[:, 2].detach().numpy(), g_c[:, 2].detach().numpy())


def test_identity_embedding_separates_query_and_candidates():
    extractor = make_extractor(seed=7)
    h = torch.zeros(1, SMALL_CFG.d_model, dtype=torch.float64)
    disp = torch.zeros(1, 2, dtype=torch.float64)
    as_query = extractor.embed_and_project(h, disp, "query")
    as_cand = extractor.embed_and_project(h, disp, "candidate")
    assert not torch.allclose(as_query, as_cand)
    with pytest.raises(ValueError, match="identity"):
        extractor.embed_and_project(h, disp, "teacher")


def test_displacement_scale_parameter_matters():
    extractor = make_extractor(seed=8)
    grids, query_pos, centers = small_batch(seed=4)
    _, f_c = extractor.descriptors(grids, query_pos, centers)
    with torch.no_grad():
        extractor.emb_scale.mul_(2.0)
    _, f_c2 = extractor.descriptors(grids, query_pos, centers)
    assert not np.allclose(f_c.detach().numpy(), f_c2.detach().numpy())


def test_build_descriptors_validates_inputs():
    video = generate_video(
        WorldConfig(frames=6, height=16, width=16, d_raw=SMALL_CFG.d_raw,
                    n_anchors=3, occlusion_rate=0.0), 0,
    )
    provider = VideoFeatureProvider(video)
    query, gt = ground_truth_tracks(video, 2)[0]
    cands = generate_candidates(gt, [], PerturbationConfig(m_candidates=3),
                                np.random.default_rng(0))
    extractor = make_extractor()
    desc = build_descriptors(provider, query, cands, extractor)
    assert desc.query.shape == (4, SMALL_CFG.d_model)  # frames [2, 6)
    assert desc.candidates.shape == (4, 3, SMALL_CFG.d_model)

    wrong_extractor = make_extractor(ModelConfig(d_raw=12, d_model=16, d_id=4))
    with pytest.raises(ValueError, match="d_raw|features"):
        build_descriptors(provider, query, cands, wrong_extractor)
    bad_query = QueryPoint(t0=1, pos=query.pos)
    with pytest.raises(ValueError, match="query is at frame"):
        build_descriptors(provider, bad_query, cands, extractor)
