import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lagstop.errors import DataError, InvalidArgument, NumericalFailure
from lagstop.features import BasisSpec, range_max
from lagstop.obstacle import ObstacleValues, PayoffFunctional, ProblemSpec, bind, build_obstacle, shiryaev_spec
from lagstop.paths import PathBatch, make_grid, simulate_brownian, simulate_walk
from lagstop.solver import (
    POLICY_PATH_OFFSET,
    ValueEstimate,
    attach_policy_value,
    estimate_Z,
    evaluate_policy,
    solve,
    solve_problem,
    stopping_histogram,
    value_at_floor,
)


def _setup(eps, n=50, N=4000, seed=1, floor=0.0, T=1.0):
    g = make_grid(T, n)
    spec = ProblemSpec((("brownian_identity", eps),), floor, T)
    b = bind(spec, g)
    batch = simulate_brownian(g, N, seed)
    return b, batch, build_obstacle(b, batch)


def _structural_ok(sol, ob):
    Y, dK, xi = sol.Y, sol.dK, ob.xi
    f = sol.bound.floor_index
    assert np.all(Y[:, f:] >= xi[:, f:])
    assert np.array_equal(Y[:, -1], xi[:, -1])
    assert np.all(dK >= 0)
    assert np.all(dK[:, f:-1] * (Y[:, f:-1] - xi[:, f:-1]) == 0)
    assert np.all(dK[:, :f] == 0)
    assert np.all(sol.rule >= f)
    assert sol.reflection_gap_min >= 0 and sol.complementarity_max == 0
    assert sol.dk_min >= 0 and sol.terminal_max_abs == 0


@pytest.mark.parametrize("eps,floor", [(0.0, 0.0), (0.2, 0.0), (0.5, 0.0), (0.7, 0.0), (0.3, 0.4), (1.0, 0.0)])
def test_structural_invariants(eps, floor):
    b, batch, ob = _setup(eps, floor=floor)
    sol = solve(batch, ob, b, store=True)
    _structural_ok(sol, ob)
    assert value_at_floor(sol).mean == pytest.approx(sol.Y[:, b.floor_index].mean(), abs=1e-15)


@settings(max_examples=12, deadline=None)
@given(st.integers(2, 24), st.data())
def test_structural_invariants_random(n, data):
    m = data.draw(st.integers(0, n))
    f = data.draw(st.integers(0, n))
    g = make_grid(1.0, n)
    spec = ProblemSpec((("brownian_identity", m / n), ("running_max", 0.0)), f / n, 1.0)
    b = bind(spec, g)
    batch = simulate_walk(g, 500, n * 31 + m)
    ob = build_obstacle(b, batch)
    _structural_ok(solve(batch, ob, b, BasisSpec(degree=2), store=True), ob)


def test_zero_obstacle():
    b, batch, ob = _setup(1.0)
    sol = solve(batch, ob, b, store=True)
    assert np.all(sol.Y == 0) and np.all(sol.dK == 0)
    v = value_at_floor(sol)
    assert v.mean == 0 and v.stderr == 0
    # every index ties (Y = xi = 0) and ties stop: all mass at index 0
    assert stopping_histogram(sol)[0] == 1.0
    Z = estimate_Z(sol, batch)
    assert np.all(Z == 0)


def test_lag_zero_value_is_zero():
    sol = solve_problem(shiryaev_spec(0.0, 1.0), make_grid(1.0, 100), 20_000, 3)
    v = sol.value_policy
    assert abs(v.mean) <= 3 * v.stderr + 0.01


def test_policy_below_insample_over_seeds():
    # low-biased policy value against high-biased in-sample value, 20 seeds
    g = make_grid(1.0, 40)
    for seed in range(20):
        sol = solve_problem(shiryaev_spec(0.25, 1.0), g, 4000, seed)
        comb = np.hypot(sol.value_policy.stderr, sol.value_insample.stderr)
        assert sol.value_policy.mean <= sol.value_insample.mean + 3 * comb


def test_always_stop_at_floor_rule():
    b, batch, ob = _setup(0.5)
    fresh = simulate_brownian(batch.grid, 3000, 99)
    v = evaluate_policy(lambda k, prefix: np.ones(prefix.shape[0], bool), fresh, build_obstacle(b, fresh), b)
    assert v.mean == 0.0 and v.bias_note == "policy-low"


def test_evaluate_policy_guards():
    b, batch, ob = _setup(0.5)
    sol = solve(batch, ob, b)
    with pytest.raises(InvalidArgument):
        evaluate_policy(sol, batch, ob, b)
    other = simulate_brownian(make_grid(1.0, 25), 100, 5)
    with pytest.raises(InvalidArgument):
        evaluate_policy(sol, other, build_obstacle(bind(shiryaev_spec(0.5, 1.0), other.grid), other), b)


def test_policy_matches_attached_chunks():
    b, batch, ob = _setup(0.3)
    sol = solve(batch, ob, b)
    attach_policy_value(sol, 10_000, threads=1)
    fresh = simulate_brownian(batch.grid, 10_000, batch.seed, path_offset=POLICY_PATH_OFFSET)
    direct = evaluate_policy(sol, fresh, build_obstacle(b, fresh), b)
    assert direct.mean == pytest.approx(sol.value_policy.mean, abs=1e-14)
    assert sol.policy_stops.sum() == 10_000


def test_nan_obstacle_is_data_error():
    b, batch, ob = _setup(0.5)
    xi = ob.xi.copy()
    xi[3, 10] = np.nan
    with pytest.raises(DataError):
        solve(batch, ObstacleValues(ob.grid, xi), b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflowing_features_are_numerical_failure():
    b, batch, ob = _setup(0.2, N=500)
    huge = PathBatch(batch.grid, batch.values * 1e160, batch.seed)
    with pytest.raises(NumericalFailure) as info:
        solve(huge, build_obstacle(b, huge), b)
    assert info.value.index is not None


def test_shape_mismatch_rejected():
    b, batch, ob = _setup(0.5)
    with pytest.raises(InvalidArgument):
        solve(batch, ObstacleValues(ob.grid, ob.xi[:10]), b)


def test_constant_shift_equivariance():
    # projection estimators are not pointwise monotone in the obstacle; the
    # exact comparison fact they do satisfy is translation equivariance
    g = make_grid(1.0, 40)
    c = 0.75
    base = ProblemSpec((("brownian_identity", 0.25),), 0.0, 1.0)
    shifted = ProblemSpec(
        (("brownian_identity", 0.25), (PayoffFunctional("const", lambda k, x: np.full(x.shape[0], c)), 0.25)),
        0.0,
        1.0,
    )
    batch = simulate_brownian(g, 5000, 8)
    b0, b1 = bind(base, g), bind(shifted, g)
    s0 = solve(batch, build_obstacle(b0, batch), b0, store=True)
    s1 = solve(batch, build_obstacle(b1, batch), b1, store=True)
    assert np.allclose(s1.Y, s0.Y + c, rtol=0, atol=1e-9)
    assert np.mean(s1.rule != s0.rule) < 1e-3


def test_no_stop_before_floor_and_flat_k():
    sol = solve_problem(shiryaev_spec(0.5, 1.0), make_grid(1.0, 100), 20_000, 4)
    lo = 50
    assert sol.policy_stops[:lo].sum() == 0
    assert np.all(stopping_histogram(sol, "policy")[:lo] == 0)
    assert (sol.rule < lo).sum() == 0
    assert sol.k_mass_profile[:lo].sum() <= 0.01 * sol.k_mass_profile.sum()
    z = np.abs(sol.dy_mean[:lo]) / sol.dy_stderr[:lo]
    assert z.max() <= 4


def test_lag_zero_z_near_one():
    # at k = n-1, Y_n = B_n, so E[Y_n dW | F] / dt = 1
    b, batch, ob = _setup(0.0, n=20, N=20_000)
    sol = solve(batch, ob, b, store=True)
    Z = estimate_Z(sol, batch)
    assert np.all(np.isfinite(Z))
    # regression-free check of the same identity
    dW = batch.increments()[:, -1]
    assert abs(np.mean(batch.values[:, -1] * dW) / batch.grid.dt - 1) < 0.1
    assert abs(Z[:, -1].mean() - 1) < 0.1


def test_thread_count_does_not_change_results():
    g = make_grid(1.0, 30)
    a = solve_problem(shiryaev_spec(0.4, 1.0), g, 9000, 2, threads=1)
    b = solve_problem(shiryaev_spec(0.4, 1.0), g, 9000, 2, threads=4)
    assert a.summary() == b.summary()


def test_value_estimate_contract():
    v = ValueEstimate.from_samples(np.array([1.0, 3.0]), "policy-low")
    assert v.mean == 2 and v.stderr == pytest.approx(1.0) and v.n_samples == 2
    with pytest.raises(InvalidArgument):
        ValueEstimate.from_samples(np.array([1.0]), "policy-low")


def test_summary_keys():
    sol = solve_problem(shiryaev_spec(0.5, 1.0), make_grid(1.0, 20), 1000, 1)
    s = sol.summary()
    for key in ("value_insample", "value_policy", "stderr", "floor", "epsilon", "n_paths",
                "n_steps", "basis", "seed", "K_mass_profile", "stop_histogram"):
        assert key in s
    assert len(s["K_mass_profile"]) == 21 and abs(sum(s["stop_histogram"]) - 1) < 1e-12


def test_range_max_matches_brute_force():
    rng = np.random.default_rng(0)
    mat = rng.normal(size=(50, 200))
    lo = np.sort(rng.integers(0, 150, 80))
    hi = np.sort(np.minimum(lo + rng.integers(0, 60, 80), 199))
    hi = np.maximum.accumulate(np.maximum(hi, lo))
    got = range_max(mat, lo, hi)
    want = np.stack([mat[:, a : b + 1].max(axis=1) for a, b in zip(lo, hi)], axis=1)
    assert np.array_equal(got, want)


def test_basis_roundtrip_and_terms():
    assert BasisSpec(degree=2).n_terms == 10
    assert BasisSpec().n_terms == 20
    b = BasisSpec(("level", "time_to_go"), 3, False)
    assert BasisSpec.from_dict(b.to_dict()) == b and b.n_terms == 7
    with pytest.raises(InvalidArgument):
        BasisSpec(("bogus",))


@pytest.mark.xfail(strict=True, reason="in-sample value is high-biased by ~2.3% on the n=16 walk; see ledger")
def test_insample_value_within_two_percent_of_oracle():
    from lagstop.oracle import oracle_solve
    from lagstop.paths import enumerate_walk

    g = make_grid(1.0, 16)
    exact = oracle_solve(enumerate_walk(16, 0.25), bind(shiryaev_spec(0.25, 1.0), g)).value_at_floor
    sol = solve_problem(shiryaev_spec(0.25, 1.0), g, 200_000, 7, kind="walk", step_size=0.25, policy_paths=1000)
    assert abs(value_at_floor(sol).mean / exact - 1) <= 0.02


@pytest.mark.xfail(strict=True, reason="grid bias 0.5826 sqrt(dt) = 0.026 at n=500 exceeds 0.012; see ledger")
def test_value_at_floor_eps_09_literal():
    sol = solve_problem(shiryaev_spec(0.9, 1.0), make_grid(1.0, 500), 20_000, 7, policy_paths=1000)
    assert abs(value_at_floor(sol).mean - np.sqrt(0.2 / np.pi)) <= 0.012
