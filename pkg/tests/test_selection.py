import numpy as np
import pytest

from trackverify.selection import (
    PseudoLabel,
    RandomTeacherSelector,
    agreement_select,
    fuse_pseudo_label,
    geometric_median_fuse,
    kalman_cv_select,
    min_acceleration_select,
    oracle_select,
    random_teacher_select,
    sample_queries,
    weiszfeld,
)
from trackverify.trajectory import CandidateSet, ReliabilityScores, Trajectory


def cand_set(frames, start=0):
    """frames: list over t of list over m of (x, y)."""
    positions = np.asarray(frames, dtype=np.float64)
    return CandidateSet(
        start=start,
        positions=positions,
        source_labels=tuple(f"c{i}" for i in range(positions.shape[1])),
    )


# --- fusion and provenance ------------------------------------------------------


def test_fuse_picks_argmax_and_majority_votes():
    cands = cand_set([
        [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)],
        [(3.0, 3.0), (4.0, 4.0), (5.0, 5.0)],
    ])
    scores = ReliabilityScores(scores=np.array([
        [0.1, 0.7, 0.2],
        [0.5, 0.3, 0.2],
    ]))
    votes = np.array([
        [True, True, False],   # 2/3 visible
        [False, True, False],  # 1/3 occluded
    ])
    label = fuse_pseudo_label(cands, scores, votes)
    np.testing.assert_array_equal(label.provenance, [1, 0])
    np.testing.assert_array_equal(label.positions, [[1.0, 1.0], [3.0, 3.0]])
    np.testing.assert_array_equal(label.visibility, [True, False])
    assert label.scores is scores
    assert label.trajectory.start == cands.start


def test_fuse_without_votes_marks_all_visible():
    cands = cand_set([[(0.0, 0.0), (1.0, 0.0)]])
    scores = ReliabilityScores(scores=np.array([[0.9, 0.1]]))
    label = fuse_pseudo_label(cands, scores, None)
    np.testing.assert_array_equal(label.visibility, [True])


def test_majority_tie_counts_visible():
    # 3 of 6 votes meets ceil(6/2)
    cands = cand_set([[(float(i), 0.0) for i in range(6)]])
    scores = ReliabilityScores(scores=np.full((1, 6), 1 / 6))
    votes = np.array([[True, True, True, False, False, False]])
    assert fuse_pseudo_label(cands, scores, votes).visibility[0]
    votes_minority = np.array([[True, True, False, False, False, False]])
    assert not fuse_pseudo_label(cands, scores, votes_minority).visibility[0]


def test_fuse_rejects_mismatched_scores():
    cands = cand_set([[(0.0, 0.0), (1.0, 0.0)]])
    with pytest.raises(ValueError, match="scores have shape"):
        fuse_pseudo_label(cands, ReliabilityScores(scores=np.full((1, 3), 1 / 3)), None)


def test_pseudo_label_provenance_must_match_scores():
    traj = Trajectory(start=0, positions=np.zeros((2, 2)),
                      visibility=np.ones(2, dtype=bool))
    scores = ReliabilityScores(scores=np.array([[0.9, 0.1], [0.2, 0.8]]))
    PseudoLabel(trajectory=traj, provenance=np.array([0, 1]), scores=scores)
    with pytest.raises(ValueError, match="argmax"):
        PseudoLabel(trajectory=traj, provenance=np.array([1, 1]), scores=scores)
    with pytest.raises(ValueError, match="provenance has shape"):
        PseudoLabel(trajectory=traj, provenance=np.array([0, 1, 0]), scores=None)
    # negative provenance marks fused output and is exempt from the argmax check
    PseudoLabel(trajectory=traj, provenance=np.array([-1, 1]), scores=scores)


# --- oracle and random teacher ---------------------------------------------------


def test_oracle_picks_closest_candidate_per_frame():
    gt = Trajectory(start=2, positions=np.array([[0.0, 0.0], [10.0, 10.0]]),
                    visibility=np.array([True, False]))
    cands = cand_set([
        [(5.0, 5.0), (0.1, 0.0), (8.0, 8.0)],
        [(10.0, 9.5), (0.0, 0.0), (20.0, 20.0)],
    ], start=2)
    label = oracle_select(cands, gt)
    np.testing.assert_array_equal(label.provenance, [1, 0])
    np.testing.assert_array_equal(label.visibility, gt.visibility)
    np.testing.assert_array_equal(
        label.scores.scores, [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]
    )


def test_random_teacher_is_constant_within_a_track():
    cands = cand_set([[(float(i), 0.0) for i in range(4)]] * 5)
    label = random_teacher_select(cands, seed=3, track_index=2)
    assert len(set(label.provenance.tolist())) == 1
    expected = int(np.random.default_rng(3).permutation(4)[2])
    assert label.provenance[0] == expected


def test_random_teacher_round_robin_balances_over_tracks():
    m = 4
    cands = cand_set([[(float(i), 0.0) for i in range(m)]] * 3)
    chosen = [
        int(random_teacher_select(cands, seed=7, track_index=i).provenance[0])
        for i in range(2 * m)
    ]
    assert sorted(chosen) == sorted(list(range(m)) * 2)
    # stateful wrapper walks the same order
    selector = RandomTeacherSelector(num_candidates=m, seed=7)
    again = [int(selector.select(cands).provenance[0]) for _ in range(2 * m)]
    assert again == chosen


def test_random_teacher_uses_teachers_own_visibility():
    cands = cand_set([[(0.0, 0.0), (1.0, 0.0)]] * 3)
    order = np.array([1, 0])
    votes = np.array([[True, False], [True, True], [False, False]])
    label = random_teacher_select(cands, seed=0, track_index=0, order=order,
                                  teacher_visibility=votes)
    np.testing.assert_array_equal(label.provenance, [1, 1, 1])
    np.testing.assert_array_equal(label.visibility, votes[:, 1])
    with pytest.raises(ValueError, match="order covers"):
        random_teacher_select(cands, seed=0, order=np.array([0, 1, 2]))


# --- geometric median -------------------------------------------------------------


def brute_force_median(points, step_target=1e-6, grid=81):
    """Coarse-to-fine grid minimizer of the summed distance objective.

    The objective is convex but nearly flat along valleys near data-point
    kinks, so the box re-centers at the same scale whenever the argmin lands
    on its boundary instead of shrinking past the minimizer."""
    lo = points.min(axis=0) - 1.0
    hi = points.max(axis=0) + 1.0
    for _ in range(300):
        xs = np.linspace(lo[0], hi[0], grid)
        ys = np.linspace(lo[1], hi[1], grid)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        cells = np.stack([gx, gy], axis=-1)
        obj = np.linalg.norm(
            cells[None, :, :, :] - points[:, None, None, :], axis=-1
        ).sum(axis=0)
        i, j = np.unravel_index(obj.argmin(), obj.shape)
        best = np.array([xs[i], ys[j]])
        step = np.array([(hi[0] - lo[0]), (hi[1] - lo[1])]) / (grid - 1)
        if i in (0, grid - 1) or j in (0, grid - 1):
            half = (hi - lo) / 2
            lo, hi = best - half, best + half
            continue
        if step.max() < step_target:
            return best
        lo = best - 3 * step
        hi = best + 3 * step
    raise AssertionError("grid refinement did not reach target resolution")


def test_weiszfeld_matches_grid_search():
    # tight budget isolates the algorithm from the bounded production default
    rng = np.random.default_rng(0)
    for _ in range(25):
        points = rng.normal(scale=10.0, size=(5, 2))
        median, converged = weiszfeld(points, tol=1e-9, max_iter=10000)
        assert converged
        assert np.linalg.norm(median - brute_force_median(points)) < 1e-4


def test_weiszfeld_default_budget_on_reference_points():
    # the documented default (tol 1e-6, 100 iterations) already resolves the
    # reference configuration to oracle accuracy
    points = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0]])
    median, converged = weiszfeld(points)
    assert converged
    assert np.linalg.norm(median - brute_force_median(points)) < 1e-4


def test_weiszfeld_reports_exhausted_budget():
    # near-data-point medians converge slowly; the flag exposes the stall
    rng = np.random.default_rng(0)
    flagged = 0
    for _ in range(25):
        points = rng.normal(scale=10.0, size=(5, 2))
        median, converged = weiszfeld(points)
        tight, _ = weiszfeld(points, tol=1e-9, max_iter=10000)
        if not converged:
            flagged += 1
        else:
            assert np.linalg.norm(median - tight) < 1e-3
    assert flagged >= 1  # this seed contains slow cases


def test_weiszfeld_collinear_and_symmetric_cases():
    # odd collinear points: the middle one
    points = np.array([[0.0, 0.0], [1.0, 0.0], [7.0, 0.0]])
    median, converged = weiszfeld(points)
    assert converged
    np.testing.assert_allclose(median, [1.0, 0.0], atol=1e-6)
    # 4-fold symmetric cloud: the center
    points = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    median, converged = weiszfeld(points)
    assert converged
    np.testing.assert_allclose(median, [0.0, 0.0], atol=1e-9)


def test_weiszfeld_singularity_at_data_point():
    # the center point is the median; the 1/distance weights are singular there
    points = np.array([[0.0, 0.0], [3.0, 0.0], [-3.0, 0.0], [0.0, 3.0], [0.0, -3.0]])
    median, converged = weiszfeld(points)
    assert converged
    np.testing.assert_array_equal(median, [0.0, 0.0])


def test_weiszfeld_scale_equivariance():
    rng = np.random.default_rng(1)
    points = rng.normal(size=(6, 2))
    base, _ = weiszfeld(points)
    scaled, _ = weiszfeld(points * 100.0)
    np.testing.assert_allclose(scaled, base * 100.0, atol=1e-3)
    shifted, _ = weiszfeld(points + [50.0, -20.0])
    np.testing.assert_allclose(shifted, base + [50.0, -20.0], atol=1e-5)


def test_geometric_median_fuse_provenance():
    cands = cand_set([
        [(0.0, 0.0), (2.0, 0.0), (1.0, 3.0)],
        [(5.0, 5.0), (5.0, 5.0), (5.0, 5.0)],
    ])
    label = geometric_median_fuse(cands)
    np.testing.assert_array_equal(label.provenance, [-1, -1])
    np.testing.assert_array_equal(label.positions[1], [5.0, 5.0])
    assert label.scores is None
    # starved iteration budget cannot converge on asymmetric points
    label = geometric_median_fuse(cands, tol=1e-12, max_iter=1)
    assert label.provenance[0] == -2


# --- heuristic selectors ----------------------------------------------------------


def test_agreement_hand_example():
    # pairwise distances: d01=1, d02=sqrt(200), d12=sqrt(181);
    # mean-to-others 7.571 / 7.227 / 13.798 -> candidate 1
    cands = cand_set([[(0.0, 0.0), (0.0, 1.0), (10.0, 10.0)]])
    label = agreement_select(cands)
    np.testing.assert_array_equal(label.provenance, [1])


def test_agreement_collinear_and_ties():
    cands = cand_set([[(0.0, 0.0), (1.0, 0.0), (10.0, 0.0)]])
    assert agreement_select(cands).provenance[0] == 1  # middle point
    pair = cand_set([[(0.0, 0.0), (3.0, 4.0)]])
    assert agreement_select(pair).provenance[0] == 0  # exact tie -> lowest index
    single = cand_set([[(4.0, 4.0)]])
    assert agreement_select(single).provenance[0] == 0


def test_kalman_cv_follows_reference_simulation():
    frames = [
        [(0.0, 0.0), (5.0, 5.0)],
        [(2.0, 0.0), (0.5, 0.5)],
        [(1.2, 1.0), (3.0, 3.0)],
        [(10.0, 10.0), (2.0, 1.4)],
    ]
    cands = cand_set(frames)
    label = kalman_cv_select(cands)
    np.testing.assert_array_equal(label.provenance, [0, 1, 0, 1])

    # independent replay of the stated update rule
    pos = np.asarray(frames[0][0])
    vel = np.zeros(2)
    expected = [0]
    for t in range(1, len(frames)):
        pts = np.asarray(frames[t])
        idx = int(np.linalg.norm(pts - (pos + vel), axis=1).argmin())
        expected.append(idx)
        vel = pts[idx] - pos
        pos = pts[idx]
    np.testing.assert_array_equal(label.provenance, expected)


def test_min_acceleration_follows_reference_simulation():
    frames = [
        [(0.0, 0.0), (9.0, 9.0)],
        [(1.0, 0.0), (9.0, 9.0)],
        [(5.0, 5.0), (2.1, 0.0)],   # extrapolation (2, 0) -> candidate 1
        [(3.0, 0.1), (10.0, 0.0)],  # extrapolation (3.2, 0) -> candidate 0
    ]
    label = min_acceleration_select(cand_set(frames))
    np.testing.assert_array_equal(label.provenance, [0, 0, 1, 0])


def test_trackers_follow_a_smooth_track_against_decoys():
    # constant-velocity truth in column 0 plus erratic decoys; both
    # motion-model selectors should lock onto column 0 after warmup
    rng = np.random.default_rng(4)
    length = 12
    truth = np.stack([np.linspace(0, 11, length), np.linspace(0, 22, length)], axis=1)
    decoy = rng.uniform(-30, 30, size=(length, 2))
    decoy2 = truth[::-1] + rng.uniform(5, 8, size=(length, 2))
    cands = CandidateSet(
        start=0,
        positions=np.stack([truth, decoy, decoy2], axis=1),
        source_labels=("a", "b", "c"),
    )
    assert np.all(kalman_cv_select(cands).provenance[2:] == 0)
    assert np.all(min_acceleration_select(cands).provenance[2:] == 0)


def test_selectors_respect_majority_votes():
    cands = cand_set([[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]] * 2)
    votes = np.array([[True, True, False], [False, False, True]])
    for select in (agreement_select, kalman_cv_select, min_acceleration_select):
        label = select(cands, teacher_visibility=votes)
        np.testing.assert_array_equal(label.visibility, [True, False])
    label = geometric_median_fuse(cands, teacher_visibility=votes)
    np.testing.assert_array_equal(label.visibility, [True, False])


# --- query sampling ---------------------------------------------------------------


def checkerboard_video(t=8, h=12, w=12):
    rng = np.random.default_rng(0)
    base = rng.uniform(size=(h, w))
    return [np.roll(base, shift=i, axis=1) for i in range(t)]


def test_sample_queries_count_and_range():
    frames = checkerboard_video()
    queries = sample_queries(frames, 10, seed=0)
    assert len(queries) == 10
    for q in queries:
        assert 0 <= q.t0 < len(frames)
        assert 0 <= q.pos[0] <= 11 and 0 <= q.pos[1] <= 11
    # default query frames sit in the first half of the video
    assert all(q.t0 < 4 for q in queries)


def test_sample_queries_deterministic():
    frames = checkerboard_video()
    a = sample_queries(frames, 7, seed=5)
    b = sample_queries(frames, 7, seed=5)
    assert [(q.t0, tuple(q.pos)) for q in a] == [(q.t0, tuple(q.pos)) for q in b]


def test_sample_queries_keypoint_slots_and_custom_detector():
    frames = checkerboard_video()
    peak = np.zeros((12, 12))
    peak[3, 4] = 1.0

    def detector(intensity):
        return peak

    queries = sample_queries(frames, 3, t0_frames=[0], seed=0, keypoint_detector=detector)
    # ceil(2*3/3) = 2 keypoint slots; one peak found, one deficit filled randomly
    at_peak = [q for q in queries if tuple(q.pos) == (4.0, 3.0)]
    assert len(at_peak) == 1 and at_peak[0].t0 == 0


def test_sample_queries_flat_video_falls_back_to_random():
    frames = [np.zeros((6, 6)) for _ in range(4)]
    queries = sample_queries(frames, 5, seed=2)
    assert len(queries) == 5


def test_sample_queries_validation():
    frames = checkerboard_video(h=4, w=4)
    with pytest.raises(ValueError, match="pixels"):
        sample_queries(frames, 17)
    with pytest.raises(ValueError, match="out of range"):
        sample_queries(frames, 2, t0_frames=[99])
    with pytest.raises(ValueError, match="n must be"):
        sample_queries(frames, 0)
