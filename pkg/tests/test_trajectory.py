import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trackverify.trajectory import (
    CandidateSet,
    QueryPoint,
    ReliabilityScores,
    Trajectory,
    candidates_from_obj,
    candidates_to_obj,
    displacements,
    dump_json,
    euclidean_errors,
    load_json,
    trajectory_from_obj,
    trajectory_to_obj,
)


def make_candidates(positions, start=0):
    positions = np.asarray(positions, dtype=np.float64)
    labels = tuple(f"c{i}" for i in range(positions.shape[1]))
    return CandidateSet(start=start, positions=positions, source_labels=labels)


def test_euclidean_errors_hand_values():
    gt = Trajectory(start=0, positions=[[0.0, 0.0]], visibility=[True])
    cands = make_candidates([[[1.0, 2.0], [3.0, 4.0]]])
    errors = euclidean_errors(cands, gt)
    # sqrt(1 + 4) and sqrt(9 + 16), computed by hand
    np.testing.assert_allclose(errors, [[2.23606797749979, 5.0]], rtol=0, atol=1e-12)


def test_euclidean_errors_rejects_misaligned_ranges():
    gt = Trajectory(start=1, positions=[[0.0, 0.0]], visibility=[True])
    cands = make_candidates([[[1.0, 2.0]]], start=0)
    with pytest.raises(ValueError, match="frame ranges differ"):
        euclidean_errors(cands, gt)


@given(
    st.integers(0, 50),
    st.lists(
        st.tuples(st.integers(-100, 100), st.integers(-100, 100)), min_size=1, max_size=8
    ),
    st.tuples(st.integers(-1000, 1000), st.integers(-1000, 1000)),
)
def test_euclidean_errors_translation_invariant_exact(start, frame, shift):
    # Integer-valued doubles add without rounding, so invariance is bit-exact.
    gt_pos = np.array([[1.0, -2.0]])
    cand_pos = np.array([frame], dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    gt = Trajectory(start=start, positions=gt_pos, visibility=[True])
    cands = make_candidates(cand_pos, start=start)
    gt_shifted = Trajectory(start=start, positions=gt_pos + shift, visibility=[True])
    cands_shifted = make_candidates(cand_pos + shift, start=start)
    np.testing.assert_array_equal(
        euclidean_errors(cands, gt), euclidean_errors(cands_shifted, gt_shifted)
    )


@given(
    st.lists(
        st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=1, max_size=8
    ),
    st.tuples(st.floats(-1000, 1000), st.floats(-1000, 1000)),
)
def test_euclidean_errors_translation_invariant_floats(frame, shift):
    gt_pos = np.array([[1.5, -2.0]])
    cand_pos = np.array([frame], dtype=np.float64)
    shift = np.asarray(shift)
    gt = Trajectory(start=0, positions=gt_pos, visibility=[True])
    cands = make_candidates(cand_pos)
    gt_shifted = Trajectory(start=0, positions=gt_pos + shift, visibility=[True])
    cands_shifted = make_candidates(cand_pos + shift)
    np.testing.assert_allclose(
        euclidean_errors(cands, gt),
        euclidean_errors(cands_shifted, gt_shifted),
        rtol=1e-9,
        atol=1e-9,
    )


def test_displacements_subtracts_query_position():
    query = QueryPoint(t0=2, pos=[10.0, 20.0])
    cands = make_candidates([[[11.0, 18.0], [10.0, 20.0]]], start=2)
    np.testing.assert_array_equal(
        displacements(cands, query), [[[1.0, -2.0], [0.0, 0.0]]]
    )
    with pytest.raises(ValueError, match="query is at frame"):
        displacements(make_candidates([[[0.0, 0.0]]], start=0), query)


def test_trajectory_validation():
    with pytest.raises(ValueError, match="at least one frame"):
        Trajectory(start=0, positions=np.zeros((0, 2)), visibility=np.zeros(0, bool))
    with pytest.raises(ValueError, match="visibility covers"):
        Trajectory(start=0, positions=np.zeros((3, 2)), visibility=[True, False])
    with pytest.raises(ValueError, match="start frame"):
        Trajectory(start=-1, positions=np.zeros((1, 2)), visibility=[True])
    with pytest.raises(ValueError, match="finite"):
        Trajectory(start=0, positions=[[np.nan, 0.0]], visibility=[True])
    traj = Trajectory(start=3, positions=np.zeros((4, 2)), visibility=np.ones(4, bool))
    assert traj.length == 4
    assert traj.frame_range() == range(3, 7)
    with pytest.raises(ValueError):
        traj.positions[0, 0] = 1.0  # frozen


def test_candidate_set_validation():
    with pytest.raises(ValueError, match="at least one candidate"):
        make_candidates(np.zeros((2, 0, 2)))
    with pytest.raises(ValueError, match="source labels"):
        CandidateSet(start=0, positions=np.zeros((1, 2, 2)), source_labels=("a",))
    cands = make_candidates(np.zeros((3, 2, 2)))
    assert cands.length == 3
    assert cands.num_candidates == 2


def test_reliability_scores_row_sums():
    ReliabilityScores(scores=[[0.25, 0.75]])
    ReliabilityScores(scores=[[0.5 + 4e-6, 0.5]])  # within tolerance
    with pytest.raises(ValueError, match="sum to 1"):
        ReliabilityScores(scores=[[0.5, 0.6]])
    with pytest.raises(ValueError, match=r"in \[0, 1\]"):
        ReliabilityScores(scores=[[1.2, -0.2]])
    with pytest.raises(ValueError, match="non-empty"):
        ReliabilityScores(scores=np.zeros((0, 3)))


def test_query_point_validation():
    q = QueryPoint(t0=0, pos=[1.0, 2.0])
    assert q.pos.dtype == np.float64
    with pytest.raises(ValueError, match="t0"):
        QueryPoint(t0=-1, pos=[0.0, 0.0])
    with pytest.raises(ValueError, match="2-vector"):
        QueryPoint(t0=0, pos=[0.0, 0.0, 0.0])


def test_trajectory_json_round_trip():
    traj = Trajectory(
        start=5,
        positions=[[0.1, 0.2], [1.0 / 3.0, -7.25]],
        visibility=[True, False],
    )
    again = trajectory_from_obj(trajectory_to_obj(traj))
    assert again.start == traj.start
    np.testing.assert_array_equal(again.positions, traj.positions)  # repr round-trip is exact
    np.testing.assert_array_equal(again.visibility, traj.visibility)
    with pytest.raises(ValueError, match="missing key"):
        trajectory_from_obj({"start": 0, "positions": [[0, 0]]})


def test_candidates_json_round_trip_keeps_extras():
    cands = make_candidates([[[0.5, 1.5], [2.5, 3.5]]], start=1)
    obj = candidates_to_obj(cands, query={"t0": 1, "pos": [0.5, 1.5]}, video="v0", skipped=None)
    assert "skipped" not in obj  # None extras are dropped
    again, full = candidates_from_obj(obj)
    assert again.start == 1
    assert again.source_labels == cands.source_labels
    np.testing.assert_array_equal(again.positions, cands.positions)
    assert full["video"] == "v0"
    assert full["query"]["t0"] == 1


def test_dump_json_is_byte_deterministic(tmp_path):
    obj = {"b": [1.0 / 3.0, 2], "a": {"nested": True}}
    dump_json(obj, tmp_path / "one.json")
    dump_json(obj, tmp_path / "two.json")
    one = (tmp_path / "one.json").read_bytes()
    assert one == (tmp_path / "two.json").read_bytes()
    assert one.endswith(b"\n")
    assert load_json(tmp_path / "one.json") == obj
