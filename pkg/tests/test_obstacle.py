import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lagstop.errors import GridMismatch, InvalidArgument, PayoffEvaluationError
from lagstop.obstacle import (
    PAYOFFS,
    PayoffFunctional,
    ProblemSpec,
    bind,
    build_obstacle,
    integrability_probe,
    obstacle_matrix,
    shiryaev_spec,
)
from lagstop.paths import make_grid, simulate_brownian


@pytest.fixture(scope="module")
def batch():
    return simulate_brownian(make_grid(1.0, 20), 500, 3)


def test_bind_examples():
    assert bind(ProblemSpec((("zero", 0.0),), 0.5, 1.0), make_grid(1.0, 4)).floor_index == 2
    assert bind(shiryaev_spec(1.0, 1.0), make_grid(1.0, 10)).lag_steps == (10,)
    with pytest.raises(GridMismatch, match="0.3"):
        bind(shiryaev_spec(0.3, 1.0), make_grid(1.0, 4))
    with pytest.raises(GridMismatch, match="floor"):
        bind(ProblemSpec((("zero", 0.0),), 0.3, 1.0), make_grid(1.0, 4))


def test_bind_tolerates_float_noise():
    assert bind(shiryaev_spec(0.1 * 3, 1.0), make_grid(1.0, 10)).lag_steps == (3,)


def test_spec_validation():
    with pytest.raises(InvalidArgument):
        shiryaev_spec(1.5, 1.0)
    with pytest.raises(InvalidArgument):
        ProblemSpec((), 0.0, 1.0)
    with pytest.raises(InvalidArgument):
        ProblemSpec((("nope", 0.0),), 0.0, 1.0)
    s = shiryaev_spec(0.5, 1.0)
    assert s.floor == 0.0 and len(s.payoffs) == 1 and s.payoffs[0][1] == 0.5
    assert ProblemSpec.from_dict(s.to_dict()) == s


def test_shiryaev_obstacle_is_lagged_level(batch):
    for eps, m in [(0.25, 5), (0.0, 0), (1.0, 20)]:
        xi = build_obstacle(bind(shiryaev_spec(eps, 1.0), batch.grid), batch).xi
        idx = np.maximum(np.arange(21) - m, 0)
        assert np.array_equal(xi, batch.values[:, idx])
    assert np.all(xi == 0)


def test_adaptedness_under_mutation(batch):
    spec = ProblemSpec((("brownian_identity", 0.2), ("running_max", 0.05)), 0.0, 1.0)
    bound = bind(spec, batch.grid)
    xi = obstacle_matrix(bound, batch.values)
    rng = np.random.default_rng(0)
    for k in (0, 4, 13):
        v = batch.values.copy()
        v[:, k + 1 :] = rng.normal(size=v[:, k + 1 :].shape) * 100
        assert np.array_equal(obstacle_matrix(bound, v)[:, : k + 1], xi[:, : k + 1])


def test_additivity(batch):
    a = ("brownian_identity", 0.3)
    b = ("running_max", 0.1)
    g = batch.grid
    two = obstacle_matrix(bind(ProblemSpec((a, b), 0.0, 1.0), g), batch.values)
    one = obstacle_matrix(bind(ProblemSpec((a,), 0.0, 1.0), g), batch.values)
    other = obstacle_matrix(bind(ProblemSpec((b,), 0.0, 1.0), g), batch.values)
    assert np.allclose(two, one + other, rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 20))
def test_shift_while_clamped(m):
    b = simulate_brownian(make_grid(1.0, 20), 20, 1)
    xi = obstacle_matrix(bind(shiryaev_spec(m / 20, 1.0), b.grid), b.values)
    for k in range(m):
        assert np.array_equal(xi[:, k], xi[:, k + 1])


def test_constant_rows_when_lag_is_horizon(batch):
    spec = ProblemSpec((("running_max", 1.0), ("brownian_identity", 1.0)), 0.0, 1.0)
    xi = obstacle_matrix(bind(spec, batch.grid), batch.values)
    assert np.all(xi == xi[:, :1])


def test_payoff_fault_has_context(batch):
    def bad(k, x):
        if k == 7:
            out = x[:, k].copy()
            if (out > 0).any():
                raise RuntimeError("boom")
        return x[:, k]

    spec = ProblemSpec(((PayoffFunctional("bad", bad), 0.0),), 0.0, 1.0)
    with pytest.raises(PayoffEvaluationError) as info:
        build_obstacle(bind(spec, batch.grid), batch)
    assert info.value.k == 7 and info.value.payoff == 0
    assert batch.values[info.value.path, 7] > 0


def test_payoff_shape_checked(batch):
    spec = ProblemSpec(((PayoffFunctional("wide", lambda k, x: x), 0.0),), 0.0, 1.0)
    with pytest.raises(PayoffEvaluationError):
        build_obstacle(bind(spec, batch.grid), batch)


def test_custom_payoff_not_serializable():
    spec = ProblemSpec(((PayoffFunctional("mine", lambda k, x: x[:, k]), 0.0),), 0.0, 1.0)
    with pytest.raises(InvalidArgument):
        spec.to_dict()
    assert set(PAYOFFS) == {"brownian_identity", "running_max", "zero"}


def test_probe_trivial_cases(batch):
    for eps in (1.0,):
        r = integrability_probe(build_obstacle(bind(shiryaev_spec(eps, 1.0), batch.grid), batch))
        assert r.estimate == 0 and r.stderr == 0 and r.warning is None
    zero = build_obstacle(bind(ProblemSpec((("zero", 0.0),), 0.0, 1.0), batch.grid), batch)
    assert integrability_probe(zero).estimate == 0


@pytest.mark.slow
def test_probe_second_moment_of_max():
    # independent check first: E (max_[0,1] B)^2 = E B_1^2 = 1 by reflection
    g = make_grid(1.0, 1000)
    b = simulate_brownian(g, 100_000, 77)
    r = integrability_probe(build_obstacle(bind(shiryaev_spec(0.0, 1.0), g), b))
    assert abs(r.estimate - 1.0) <= 0.05
    assert r.warning is None


def test_probe_flags_heavy_tail():
    g = make_grid(1.0, 2)
    vals = np.zeros((64, 3))
    vals[:, 1] = 1.0
    vals[-1, 1] = 1e6  # one enormous path, only in the full sample
    from lagstop.obstacle import ObstacleValues

    with pytest.warns(RuntimeWarning):
        r = integrability_probe(ObstacleValues(g, obstacle_matrix(bind(shiryaev_spec(0.0, 1.0), g), vals)))
    assert r.warning is not None
