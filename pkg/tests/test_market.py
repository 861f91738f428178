import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from conftest import random_spec
from lmsbi.errors import NumericError, ResourceError, ValidationError
from lmsbi.market import (
    BehaviouralParams,
    MarketSpec,
    MarketState,
    SimulationConfig,
    application_weights,
    demand_path,
    init_state,
    micro_memory_estimate,
    simulate,
    simulate_micro,
    step,
    target_demand,
)

THETA = BehaviouralParams(0.016, 0.012, 0.55)


def test_init_state_two_node(two_node):
    s = init_state(two_node)
    assert s.e.tolist() == [10, 20]
    assert s.u.tolist() == [0, 0] and s.v.tolist() == [0, 0]
    assert s.d.tolist() == [10.0, 20.0]


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n=2, z=[0, 5], p=[0.1, 0.1], P=np.eye(2)),
        dict(n=2, z=[5, 5], p=[1.2, 0.1], P=np.eye(2)),
        dict(n=2, z=[5, 5], p=[0.1, 0.1], P=[[0.5, 0.6], [0.5, 0.5]]),
        dict(n=2, z=[5, 5], p=[0.1, 0.1], P=[[1.5, -0.5], [0.5, 0.5]]),
        dict(n=0, z=[], p=[], P=np.zeros((0, 0))),
        dict(n=2, z=[5.5, 5], p=[0.1, 0.1], P=np.eye(2)),
    ],
)
def test_spec_validation(kwargs):
    with pytest.raises(ValidationError):
        MarketSpec(**kwargs)


def test_spec_arrays_read_only(two_node):
    with pytest.raises(ValueError):
        two_node.z[0] = 3


def test_large_spec_conservation_at_start():
    gen = np.random.default_rng(0)
    spec = random_spec(gen, n=464)
    s = init_state(spec)
    assert s.e.sum() + s.u.sum() == spec.z.sum()


def test_params_range():
    with pytest.raises(ValidationError):
        BehaviouralParams(0.03, 0.01, 0.5)
    with pytest.raises(ValidationError):
        BehaviouralParams(0.01, 0.01, 1.5)
    with pytest.raises(ValidationError):
        BehaviouralParams.from_array([0.01, 0.01])
    assert np.array_equal(BehaviouralParams.from_array([0.01, 0.02, 0.3]).as_array(), [0.01, 0.02, 0.3])


def test_target_demand_shock_rescaling():
    spec = MarketSpec(n=2, z=[100, 100], p=[0.9, 0.0], P=np.full((2, 2), 0.5))
    cfg = SimulationConfig(T=10, t_shock=5)
    assert np.array_equal(target_demand(spec, 4, cfg), [100.0, 100.0])
    d = target_demand(spec, 5, cfg)
    np.testing.assert_allclose(d, [100 * 0.1 * 200 / 110, 100 * 200 / 110], rtol=1e-12)
    np.testing.assert_allclose(d, [18.1818181818, 181.8181818182], atol=1e-9)
    assert d.sum() == pytest.approx(200.0)
    with pytest.raises(ValidationError):
        target_demand(spec, 10, cfg)


def test_demand_constant_without_automation():
    spec = MarketSpec(n=3, z=[10, 20, 30], p=[0, 0, 0], P=np.full((3, 3), 1 / 3))
    for mode in ("step", "sigmoid"):
        path = demand_path(spec, SimulationConfig(T=50, t_shock=20, shock_mode=mode))
        np.testing.assert_allclose(path, np.broadcast_to([10, 20, 30], (50, 3)), rtol=1e-14)


def test_demand_path_matches_pointwise(market10):
    for mode in ("step", "sigmoid"):
        cfg = SimulationConfig(T=40, t_shock=15, shock_mode=mode)
        path = demand_path(market10, cfg)
        for t in (0, 14, 15, 16, 39):
            np.testing.assert_allclose(path[t], target_demand(market10, t, cfg), rtol=1e-13)


def test_shock_lowers_automatable_demand(market10):
    cfg = SimulationConfig(T=10, t_shock=2)
    raw = (1 - market10.p) * market10.z
    assert np.all(raw[market10.p > 0] < market10.z[market10.p > 0])
    assert target_demand(market10, 9, cfg).sum() == pytest.approx(market10.z.sum())


def test_application_weights_rows():
    gen = np.random.default_rng(3)
    spec = random_spec(gen, n=5)
    W = application_weights(spec, 0.3)
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.diag(W), 0.3 + 0.7 * np.diag(spec.P))


@given(st.integers(0, 2**32 - 1))
def test_step_invariants(seed):
    gen = np.random.default_rng(seed)
    spec = random_spec(gen)
    state = MarketState(
        e=gen.integers(0, 30, spec.n), u=np.zeros(spec.n, np.int64), v=gen.integers(0, 10, spec.n),
        d=spec.z.astype(float),
    )
    moved = gen.integers(0, state.e + 1)
    state.e = state.e - moved
    state.u = moved
    spec = MarketSpec(n=spec.n, z=state.e + state.u + (state.e + state.u == 0), p=spec.p, P=spec.P)
    state.e = spec.z - state.u
    params = BehaviouralParams(gen.uniform(0, 0.02), gen.uniform(0, 0.02), gen.uniform(0, 1))
    demand = gen.uniform(0, 40, spec.n)
    new, J = step(state, spec, params, demand, gen, gamma_u=gen.uniform(), gamma_v=gen.uniform())
    assert new.e.sum() + new.u.sum() == spec.workforce
    assert np.all(new.e >= 0) and np.all(new.u >= 0) and np.all(new.v >= 0) and np.all(J >= 0)
    # hires never exceed the vacancies available (old plus new)
    assert np.all(J.sum(axis=0) <= state.v + state.e)
    assert np.all(J.sum(axis=0) <= state.v + new.v + J.sum(axis=0))


def test_zero_rates_fixed_point_step(market10):
    s = init_state(market10)
    new, J = step(s, market10, BehaviouralParams(0, 0, 0.5), s.d, np.random.default_rng(0), 0.0, 0.0)
    assert np.array_equal(new.e, s.e) and np.array_equal(new.u, s.u) and np.array_equal(new.v, s.v)
    assert not J.any()


def test_single_occupation_hiring_bounded():
    spec = MarketSpec(n=1, z=[5], p=[0.0], P=[[1.0]])
    s = MarketState(e=np.array([0]), u=np.array([5]), v=np.array([3]), d=np.array([5.0]))
    for seed in range(20):
        new, J = step(s, spec, BehaviouralParams(0, 0, 1.0), s.d, np.random.default_rng(seed), 0.0, 0.0)
        assert J[0, 0] == 3
        assert new.e[0] == 3 and new.u[0] == 2 and new.v[0] == 0


def test_no_vacancies_no_hires():
    spec = MarketSpec(n=2, z=[5, 5], p=[0.0, 0.0], P=np.full((2, 2), 0.5))
    s = MarketState(e=np.array([0, 5]), u=np.array([5, 0]), v=np.array([0, 0]), d=np.array([5.0, 5.0]))
    new, J = step(s, spec, BehaviouralParams(0, 0, 0.5), s.d, np.random.default_rng(0), 0.0, 0.0)
    assert not J.any() and new.u[0] == 5


def _application_counts(u0, reps, seed):
    # vacancies exceed applicants, so hires in row 0 equal applications
    gen = np.random.default_rng(seed)
    n = 40
    spec = random_spec(gen, n=n, zmax=1)
    spec = MarketSpec(n=n, z=np.r_[u0, np.ones(n - 1, np.int64)], p=spec.p, P=spec.P)
    v = gen.integers(1, 4, n) * max(u0, 1) * 1000
    s = MarketState(e=np.r_[0, np.ones(n - 1, np.int64)], u=np.r_[u0, np.zeros(n - 1, np.int64)], v=v,
                    d=spec.z.astype(float))
    params = BehaviouralParams(0, 0, 0.3)
    counts = np.zeros(n)
    for _ in range(reps):
        _, J = step(s, spec, params, s.d, gen, 0.0, 0.0)
        counts += J[0]
    w = application_weights(spec, 0.3)[0] * v
    return counts, w / w.sum()


@pytest.mark.parametrize("u0,reps", [(1, 20000), (20000, 1)])
def test_application_distribution(u0, reps):
    counts, p = _application_counts(u0, reps, seed=7)
    assert counts.sum() == u0 * reps
    assert chisquare(counts, counts.sum() * p).pvalue > 1e-4


def test_unreachable_vacancies_leave_workers_unemployed():
    spec = MarketSpec(n=3, z=[4, 1, 1], p=[0.0] * 3, P=np.eye(3))
    s = MarketState(e=np.array([0, 1, 1]), u=np.array([4, 0, 0]), v=np.array([0, 5, 5]), d=np.array([4.0, 1, 1]))
    new, J = step(s, spec, BehaviouralParams(0, 0, 1.0), s.d, np.random.default_rng(0), 0.0, 0.0)
    assert not J.any() and new.u[0] == 4


def test_step_rejects_bad_demand(market10):
    with pytest.raises(ValidationError):
        step(init_state(market10), market10, THETA, np.ones(3), np.random.default_rng(0))


def test_simulate_shape_and_determinism(market10):
    cfg = SimulationConfig(T=1, seed=4)
    assert simulate(market10, THETA, cfg).data.shape == (1, 40)
    cfg = SimulationConfig(T=200, t_shock=50, seed=4)
    a = simulate(market10, THETA, cfg)
    b = simulate(market10, THETA, cfg)
    assert a == b
    assert a != simulate(market10, THETA, SimulationConfig(T=200, t_shock=50, seed=5))


def test_simulate_conservation_rows(market10):
    traj = simulate(market10, THETA, SimulationConfig(T=300, t_shock=100, seed=1, vacancy_lifetime=5))
    tot = traj.indicator("e").sum(axis=1) + traj.indicator("u").sum(axis=1)
    assert np.all(tot == market10.workforce)
    assert np.all(traj.data[:, :30] >= 0)


def test_unemployment_positive_after_shock(market10):
    cfg = SimulationConfig(T=600, t_shock=231)
    ok = 0
    for seed in range(100):
        ur = simulate(market10, THETA, SimulationConfig(T=600, t_shock=231, seed=seed)).unemployment_rate()
        ok += bool(np.all(ur[cfg.t_shock:] > 0))
    assert ok >= 95


def test_micro_shapes_and_bookkeeping():
    gen = np.random.default_rng(2)
    spec = random_spec(gen, n=2)
    m = simulate_micro(spec, THETA, SimulationConfig(T=3, seed=1))
    assert m.transitions.shape == (3, 2, 2) and m.transitions.dtype == np.int64
    assert m.blocks().shape == (3, 2, 6)


def test_micro_r1_diagonal_only(market10):
    m = simulate_micro(market10, BehaviouralParams(0.02, 0.02, 1.0), SimulationConfig(T=200, t_shock=20, seed=2))
    off = m.transitions.copy()
    for t in range(off.shape[0]):
        np.fill_diagonal(off[t], 0)
    assert not off.any()
    assert m.transitions.sum() > 0


def test_micro_matches_macro_and_feasibility(market10):
    cfg = SimulationConfig(T=300, t_shock=100, seed=9)
    m = simulate_micro(market10, THETA, cfg)
    assert m.indicators == simulate(market10, THETA, cfg)
    e, u, v = (m.indicators.indicator(k) for k in ("e", "u", "v"))
    hires = m.transitions.sum(axis=1)
    moves = m.transitions.sum(axis=2)
    e_prev = np.vstack([market10.z, e[:-1]])
    u_prev = np.vstack([np.zeros(10), u[:-1]])
    seps = e_prev + hires - e
    # movers come from the pool after separations; hires fill at most the vacancies left open
    assert np.all(seps >= 0)
    assert np.all(moves <= u_prev + seps)
    assert np.all(v >= 0)
    assert np.all(hires >= 0)


def test_micro_budget_refusal(market10):
    with pytest.raises(ResourceError) as info:
        simulate_micro(market10, THETA, SimulationConfig(T=600), memory_budget=1000)
    assert info.value.estimate == micro_memory_estimate(1, 600, 10, 8)
    assert info.value.exit_code == 5


def test_micro_memory_estimate_values():
    assert micro_memory_estimate(1000, 600, 464, 2) == 260_582_400_000
    assert micro_memory_estimate(1000, 600, 464, 2) / 1024**3 == pytest.approx(242.69, abs=0.005)
    assert micro_memory_estimate(1, 1, 1, 1) == 5
    assert micro_memory_estimate(1, 1, 464, 2) == 434_304
    with pytest.raises(ValidationError):
        micro_memory_estimate(0, 600, 464, 2)
    with pytest.raises(NumericError):
        micro_memory_estimate(10**9, 10**9, 10**4, 8)


@given(st.integers(1, 10**4), st.integers(1, 10**3), st.integers(1, 500), st.sampled_from([1, 2, 4, 8]))
def test_micro_memory_estimate_formula(sims, T, n, bpe):
    assert micro_memory_estimate(sims, T, n, bpe) == sims * T * n * (n + 4) * bpe


def test_config_validation():
    with pytest.raises(ValidationError):
        SimulationConfig(T=0)
    with pytest.raises(ValidationError):
        SimulationConfig(T=10, t_shock=10)
    with pytest.raises(ValidationError):
        SimulationConfig(shock_mode="ramp")
    with pytest.raises(ValidationError):
        SimulationConfig(gamma_u=1.5)


def test_burn_in_and_vacancy_lifetime_run(market10):
    a = simulate(market10, THETA, SimulationConfig(T=50, burn_in=20, seed=1))
    b = simulate(market10, THETA, SimulationConfig(T=50, seed=1))
    assert a != b
    c = simulate(market10, THETA, SimulationConfig(T=300, seed=1, vacancy_lifetime=1))
    d = simulate(market10, THETA, SimulationConfig(T=300, seed=1))
    assert c.indicator("v").mean() <= d.indicator("v").mean()
