import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logit

from orthoddc import backend, dgp, valuesim
from orthoddc.valuesim import COIN, DEVIATION, OPTIMAL, PolicySpec, SimConfig

THETA0 = dgp.default_truth().theta()


@pytest.fixture(scope="module")
def setup(small_model, small_table, small_panel):
    idx = np.arange(12)
    nuis = valuesim.oracle_tables(small_model, small_table, small_panel.x[idx])
    return small_model, nuis, small_panel.s[idx]


def _draws(n, T, P, kern, seed=3, anti=True):
    d = [np.empty((n, T, P)) for _ in range(5)]
    kern.draw_block(seed, np.arange(n, dtype=np.int64), anti, *d)
    return d


@pytest.mark.skipif(backend.compiled is None, reason="compiled kernel not built")
def test_backends_agree(setup):
    model, nuis, s0 = setup
    n, T, P = s0.size, 30, 6
    dc = _draws(n, T, P, backend.compiled)
    dp = _draws(n, T, P, backend.python)
    for a, b in zip(dc, dp):
        assert np.allclose(a, b, rtol=1e-13, atol=1e-13)
    rows = np.arange(n, dtype=np.int64)
    outs = []
    for kern in (backend.compiled, backend.python):
        for first in (-1, 0, 1):
            out = np.empty((n, P, 3))
            zn = np.empty((n, P))
            kern.rollout(0, s0, rows, first, False, 0.5, nuis.logit, nuis.rho, nuis.sig, nuis.rho,
                         nuis.grid_lo, 1.0 / nuis.grid_step, model.s_lo, model.s_hi, nuis.logit_cap,
                         model.beta, T - 1, 0.0, 0.0, *dc, out, zn)
            outs.append((out.copy(), zn.copy()))
    for (oc, zc), (op, zp) in zip(outs[:3], outs[3:]):
        assert np.array_equal(oc, op) and np.array_equal(zc, zp)


@pytest.mark.parametrize("policy", [valuesim.OPTIMAL_POLICY, PolicySpec(COIN), PolicySpec(DEVIATION, -1.0)])
def test_basis_matches_direct_value(setup, policy):
    model, nuis, s0 = setup
    sim = SimConfig(n_paths=4, tol_tail=1e-2)
    basis = valuesim.forward_value_basis(s0[:3], policy, nuis, model, sim)
    for theta in ([5.0, 1.0], [0.3, 2.7], [9.0, 0.0]):
        direct = valuesim.direct_value(s0[:3], theta, policy, nuis, model, sim)
        assert np.max(np.abs(basis.value(theta) - direct)) <= 1e-9


def test_simulation_is_deterministic(setup):
    model, nuis, s0 = setup
    sim = SimConfig(n_paths=20)
    a = valuesim.forward_value_basis(s0, valuesim.OPTIMAL_POLICY, nuis, model, sim)
    b = valuesim.forward_value_basis(s0, valuesim.OPTIMAL_POLICY, nuis, model, sim)
    assert np.array_equal(a.psi1, b.psi1) and np.array_equal(a.psi2, b.psi2)
    # a start's value depends only on its own key, not on the batch
    c = valuesim.forward_value_basis(s0[5:7], valuesim.OPTIMAL_POLICY, nuis.take([5, 6]), model, sim,
                                     keys=[5, 6])
    assert np.array_equal(c.psi2, a.psi2[5:7])
    d = valuesim.forward_value_basis(s0, valuesim.OPTIMAL_POLICY, nuis, model,
                                     SimConfig(n_paths=20, base_seed=1))
    assert not np.array_equal(a.psi2, d.psi2)


def test_zero_shift_deviation_equals_optimal(setup):
    model, nuis, s0 = setup
    sim = SimConfig(n_paths=10)
    a = valuesim.forward_value_basis(s0, valuesim.OPTIMAL_POLICY, nuis, model, sim)
    b = valuesim.forward_value_basis(s0, PolicySpec(DEVIATION, 0.0), nuis, model, sim)
    assert np.array_equal(a.psi1, b.psi1) and np.array_equal(a.psi2, b.psi2)


@given(beta=st.floats(0.0, 0.99), tol=st.floats(1e-8, 1e-1), pi_max=st.floats(1.0, 100.0))
@settings(max_examples=100, deadline=None)
def test_horizon_meets_tail_bound(beta, tol, pi_max):
    sim = SimConfig(tol_tail=tol, pi_max=pi_max)
    H = sim.horizon(beta)
    assert H >= 1
    assert sim.tail_bound(beta) <= tol * (1 + 1e-9) or beta == 0.0
    if H > 1:
        # one period shorter would violate the bound
        assert beta ** (H - 1) * pi_max / (1 - beta) > tol * (1 - 1e-9)


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(n_paths=3)
    with pytest.raises(ValueError):
        SimConfig(tol_tail=0.0)
    with pytest.raises(ValueError):
        PolicySpec("greedy")
    with pytest.raises(ValueError):
        PolicySpec(COIN, 1.0)


def test_hotz_miller_gap():
    assert valuesim.hotz_miller_gap(0.5) == 0.0
    g = np.array([0.1, 0.73, 0.999])
    assert np.allclose(valuesim.hotz_miller_gap(g), logit(g))
    for bad in (0.0, 1.0, -0.1, np.array([0.5, 1.2])):
        with pytest.raises(ValueError):
            valuesim.hotz_miller_gap(bad)


@given(g=st.floats(0.01, 0.99), dev=st.floats(-3, 3))
@settings(max_examples=50, deadline=None)
def test_policy_probability_and_derivative(g, dev):
    pol = PolicySpec(DEVIATION, dev)
    h = 1e-6
    fd = (pol.choice_prob(g + h) - pol.choice_prob(g - h)) / (2 * h)
    assert abs(pol.dprob_dgamma(g) - fd) < 1e-5 * max(1.0, abs(fd))
    assert np.isclose(PolicySpec(OPTIMAL).choice_prob(g), g)


@pytest.mark.parametrize("dev", [0.0, 1.0, -1.0])
def test_selected_shock_against_monte_carlo(dev):
    r = np.random.default_rng(1)
    n = 2_000_000
    e0, e1 = r.gumbel(size=n), r.gumbel(size=n)
    g = 0.7
    a = valuesim.act(PolicySpec(DEVIATION, dev), g, e0, e1)
    chosen = np.where(a == 1, e1, e0)
    p = a.mean()
    assert abs(p - PolicySpec(DEVIATION, dev).choice_prob(g)) < 5 * np.sqrt(p * (1 - p) / n)
    want = valuesim.selected_shock_mean(PolicySpec(DEVIATION, dev).choice_prob(g))
    assert abs(chosen.mean() - want) < 5 * chosen.std() / np.sqrt(n)
    if dev == 0.0:
        d = np.mean((e1 - e0) * (a == 1))
        assert abs(d - valuesim.expected_selected_shock(g)) < 5 * np.std((e1 - e0) * (a == 1)) / np.sqrt(n)


def test_coin_needs_uniform():
    with pytest.raises(ValueError):
        valuesim.act(PolicySpec(COIN), 0.5, 0.0, 0.0)


def test_continuation_values_match_dp(small_model, small_table):
    x = np.zeros((2, small_model.d_x))
    s0 = np.array([2.0, 6.0])
    nuis = valuesim.oracle_tables(small_model, small_table, x)
    sim = SimConfig(n_paths=4000, tol_tail=1e-4)
    orc = small_table.oracle(x)
    beta = small_model.beta
    u = {0: -THETA0[0] + 0 * s0, 1: -THETA0[1] * s0}
    for a, tab in ((0, orc.v0), (1, orc.v1)):
        c = valuesim.continuation_value(s0, a, valuesim.OPTIMAL_POLICY, nuis, small_model, sim)
        want = dgp.interp_rows(tab, orc.s_grid, s0)
        # v(a, w) = u_a + beta E[V(w') | w, a]
        assert np.all(np.abs(u[a] + beta * c.value(THETA0) - want) < 0.3)


def test_antithetic_pairs_share_shocks(setup):
    model, nuis, s0 = setup
    sim = SimConfig(n_paths=4)
    b = valuesim.forward_value_basis(s0[:2], valuesim.OPTIMAL_POLICY, nuis, model, sim, keep_paths=True)
    assert b.paths.shape == (2, 4, 3)
    assert np.allclose(b.paths.mean(axis=1)[:, :2], b.psi1)
