import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaussian_atlas.errors import CapacityError, StaleCacheError, ValidationError
from gaussian_atlas.transport import (
    AssignmentIndex, AuctionConfig, CostSpec, cost_of, load_index, save_index, solve_exact,
    solve_scalable,
)


def brute_force_min(cost: np.ndarray) -> float:
    m, n = cost.shape
    perms = np.array(list(itertools.permutations(range(n), m)), dtype=np.int64).reshape(-1, m)
    return float(cost[np.arange(m), perms].sum(axis=1).min())


def eps_min(spec: CostSpec) -> float:
    return 1e-7 * spec.mean_cost()


def test_single_source_picks_coincident_target():
    idx = solve_exact(CostSpec([[0, 0, 1]], [[0, 0, 1], [0, 0, -1]]))
    assert idx.mapping.tolist() == [0]
    assert idx.total_cost == 0.0
    assert idx.epsilon_final == 0.0


def test_shuffled_identical_sets_are_unshuffled(rng):
    pts = rng.normal(size=(5, 3))
    perm = rng.permutation(5)
    idx = solve_exact(CostSpec(pts, pts[perm]))
    assert idx.total_cost == 0.0
    np.testing.assert_array_equal(perm[idx.mapping], np.arange(5))


def test_7x9_matches_stored_enumeration(fixture_json):
    fx = fixture_json("ot_7x9.json")
    spec = CostSpec(fx["sources"], fx["targets"])
    idx = solve_exact(spec)
    assert idx.total_cost == pytest.approx(fx["min_cost"], abs=1e-12)
    assert cost_of(spec, fx["argmin"]) == pytest.approx(fx["min_cost"], abs=1e-12)


def test_random_mappings_never_beat_the_optimum(fixture_json, rng):
    fx = fixture_json("ot_7x9.json")
    spec = CostSpec(fx["sources"], fx["targets"])
    for _ in range(200):
        assert cost_of(spec, rng.permutation(9)[:7]) >= fx["min_cost"] - 1e-12


def test_exact_matches_enumeration_on_many_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m = int(rng.integers(1, 9))
        n = int(rng.integers(m, min(m + 2, 8) + 1)) if m < 8 else 8
        d = int(rng.choice([2, 3]))
        spec = CostSpec(rng.uniform(-1, 1, (m, d)), rng.uniform(-1, 1, (n, d)))
        assert solve_exact(spec).total_cost == pytest.approx(brute_force_min(spec.dense()), abs=1e-12)


def test_exact_guard():
    pts = np.zeros((5, 2))
    with pytest.raises(CapacityError, match="solve_scalable"):
        solve_exact(CostSpec(pts, pts), max_sources=4)


def test_wraparound_distance():
    spec = CostSpec([[0.95, 0.5]], [[0.05, 0.5]], wraparound=(1.0, None))
    assert cost_of(spec, [0]) == pytest.approx(0.01, abs=1e-15)
    plain = CostSpec([[0.95, 0.5]], [[0.05, 0.5]])
    assert cost_of(plain, [0]) == pytest.approx(0.81)


def test_exact_total_cost_is_self_consistent(rng):
    spec = CostSpec(rng.normal(size=(30, 3)), rng.normal(size=(40, 3)))
    idx = solve_exact(spec)
    assert cost_of(spec, idx.mapping) == pytest.approx(idx.total_cost, abs=1e-9)


@pytest.mark.parametrize("mapping", [[0, 0], [0, 5], [-1, 1]])
def test_invalid_mappings(mapping):
    spec = CostSpec(np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(ValidationError):
        cost_of(spec, mapping)


def test_cost_spec_validation():
    with pytest.raises(ValidationError):
        CostSpec(np.zeros((3, 2)), np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        CostSpec(np.zeros((1, 4)), np.zeros((2, 4)))
    with pytest.raises(ValidationError):
        CostSpec(np.zeros((1, 2)), np.zeros((2, 2)), wraparound=(0.0, None))
    with pytest.raises(ValidationError):
        CostSpec(np.zeros((1, 2)), np.zeros((2, 2)), metric="l1")


def test_mean_cost_matches_dense(rng):
    spec = CostSpec(rng.uniform(0, 1, (20, 2)), rng.uniform(0, 1, (25, 2)), wraparound=(1.0, None))
    assert spec.mean_cost() == pytest.approx(spec.dense().mean(), rel=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_auction_within_bound_of_exact_small(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 65))
    spec = CostSpec(rng.normal(size=(m, 3)), rng.normal(size=(m + int(rng.integers(0, 20)), 3)))
    exact = solve_exact(spec).total_cost
    auction = solve_scalable(spec)
    assert auction.solver == "auction"
    assert auction.total_cost <= exact + m * eps_min(spec) + 1e-12
    assert auction.total_cost >= exact - 1e-9


def test_auction_handles_wraparound():
    rng = np.random.default_rng(3)
    spec = CostSpec(rng.uniform(0, 1, (200, 2)), rng.uniform(0, 1, (256, 2)), wraparound=(1.0, None))
    exact = solve_exact(spec).total_cost
    assert solve_scalable(spec).total_cost <= exact + 200 * eps_min(spec) + 1e-12


@pytest.mark.parametrize("n", [1, 7, 300])
def test_zero_cost_detection_both_solvers(n):
    rng = np.random.default_rng(n)
    pts = rng.normal(size=(n, 3))
    spec = CostSpec(pts, pts[rng.permutation(n)])
    assert solve_exact(spec).total_cost == 0.0
    assert solve_scalable(spec).total_cost == 0.0


def test_auction_is_deterministic():
    rng = np.random.default_rng(9)
    spec = CostSpec(rng.normal(size=(500, 3)), rng.normal(size=(600, 3)))
    a, b = solve_scalable(spec), solve_scalable(spec)
    assert a.mapping.tobytes() == b.mapping.tobytes()


def test_auction_window_does_not_change_result():
    rng = np.random.default_rng(11)
    spec = CostSpec(rng.uniform(0, 1, (400, 2)), rng.uniform(0, 1, (400, 2)), wraparound=(1.0, None))
    cached = solve_scalable(spec, AuctionConfig(window=64))
    full_scan = solve_scalable(spec, AuctionConfig(window=0))
    np.testing.assert_array_equal(cached.mapping, full_scan.mapping)


def test_empty_source_set():
    spec = CostSpec(np.zeros((0, 3)), np.ones((4, 3)))
    assert solve_exact(spec).n_source == 0
    assert solve_scalable(spec).n_source == 0


def test_assignment_index_validates():
    with pytest.raises(ValidationError):
        AssignmentIndex([1, 1], 0.0, "exact", 0.0, 3)
    with pytest.raises(ValidationError):
        AssignmentIndex([3], 0.0, "exact", 0.0, 3)
    inv = AssignmentIndex([2, 0], 0.0, "exact", 0.0, 3).inverse()
    assert inv.tolist() == [1, -1, 0]


def test_gidx_round_trip_and_hash_check(tmp_path, rng):
    spec = CostSpec(rng.normal(size=(10, 3)), rng.normal(size=(12, 3)))
    idx = solve_exact(spec)
    save_index(idx, tmp_path / "a.gidx", "abc")
    back, header = load_index(tmp_path / "a.gidx", expected_hash="abc")
    np.testing.assert_array_equal(back.mapping, idx.mapping)
    assert header["n_target"] == 12 and header["solver"] == "exact"
    raw = (tmp_path / "a.gidx").read_bytes()
    assert raw.startswith(b"GIDX1\n") and len(raw.split(b"}", 1)[1]) == 4 * 10
    with pytest.raises(StaleCacheError):
        load_index(tmp_path / "a.gidx", expected_hash="other")


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2), st.integers(0, 2**32 - 1))
def test_exact_optimality_property(m, extra, seed):
    rng = np.random.default_rng(seed)
    spec = CostSpec(rng.uniform(-1, 1, (m, 2)), rng.uniform(-1, 1, (m + extra, 2)), wraparound=(2.0, None))
    idx = solve_exact(spec)
    assert len(set(idx.mapping.tolist())) == m
    assert idx.total_cost == pytest.approx(brute_force_min(spec.dense()), abs=1e-12)
