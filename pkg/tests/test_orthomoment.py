import numpy as np
import pytest

from orthoddc import dgp, orthomoment, valuesim
from orthoddc.occupancy import occupancy_ratios
from orthoddc.orthomoment import MomentConfig, build_moments, perturb

THETAS = np.array([[5.0, 1.0], [3.0, 0.6], [7.0, 1.5]])
SIM = valuesim.SimConfig(n_paths=8)


@pytest.fixture(scope="module")
def bus(small_model, small_table, small_panel):
    panel = small_panel.subset(np.arange(120))
    return panel, valuesim.oracle_tables(small_model, small_table, panel.x)


@pytest.fixture(scope="module")
def evals(bus):
    panel, nuis = bus
    cfg = MomentConfig()
    return build_moments(panel, nuis, SIM, cfg), build_moments(panel, nuis, SIM, cfg.flipped()), \
        build_moments(panel, nuis, SIM, cfg.naive())


def test_shapes_and_labels(evals, bus):
    ev = evals[0]
    n = len(bus[0])
    assert ev.m.shape == (n, 3, 3)
    assert ev.labels == ("coin", "dev+1", "dev-1")
    assert set(ev.parts) == {"ccp", "trans", "opp"}
    assert np.all(ev.parts["opp"] == 0)


def test_naive_config_has_no_correction(evals):
    orth, _, naive = evals
    assert naive.parts == {}
    assert np.array_equal(naive.g, naive.m)
    # the naive moment does not depend on the corrections being requested
    assert np.array_equal(naive.m, orth.m)


def test_flipped_negates_correction(evals):
    orth, flip, _ = evals
    assert np.allclose(flip.alpha, -orth.alpha, atol=1e-12)
    assert np.array_equal(flip.m, orth.m)


def test_affine_storage_matches_direct_evaluation(evals):
    ev = evals[0]
    vals = ev.values(THETAS, "g")
    for t, th in enumerate(THETAS):
        direct = ev.g[..., 0] * th[0] + ev.g[..., 1] * th[1] + ev.g[..., 2]
        assert np.allclose(vals[t], direct)
    assert np.allclose(ev.sample_mean(THETAS), vals.mean(axis=1))
    assert np.allclose(ev.sample_sd(THETAS), vals.std(axis=1, ddof=1))


def test_observed_policy_has_zero_moment(bus):
    panel, nuis = bus
    from orthoddc.valuesim import OPTIMAL_POLICY
    ev = build_moments(panel, nuis, SIM, MomentConfig(policies=(OPTIMAL_POLICY,)))
    assert np.all(ev.m == 0) and np.allclose(ev.alpha, 0)


@pytest.mark.parametrize("family", ["ccp", "transition"])
def test_perturb_at_zero_is_identity(bus, family):
    nuis = bus[1]
    p = perturb(nuis, family, 0.0)
    assert np.allclose(p.logit, nuis.logit, atol=1e-9)
    assert np.array_equal(p.rho, nuis.rho)
    q = perturb(nuis, family, 0.05)
    assert not (np.array_equal(q.logit, nuis.logit) and np.array_equal(q.rho, nuis.rho))


def test_ccp_perturbation_stays_inside_unit_interval(bus):
    nuis = bus[1]
    g0 = 1 / (1 + np.exp(-nuis.logit))
    for r in (-0.1, 0.1):
        g = 1 / (1 + np.exp(-perturb(nuis, "ccp", r).logit))
        assert np.all(np.abs(g - g0) <= 0.25 * np.minimum(g0, 1 - g0) + 1e-12)


def test_zero_direction_gives_zero_slopes(bus):
    panel, nuis = bus
    res = orthomoment.orthogonality_check(panel.subset(np.arange(20)), THETAS, nuis.take(np.arange(20)),
                                          "transition", SIM, MomentConfig(), r_grid=[-0.1, 0, 0.1],
                                          delta=lambda s: 0.0 * s)
    for name in ("naive", "orthogonal", "flipped"):
        assert np.max(np.abs(res.slope[name])) < 1e-10


def test_orthogonality_check_validates_inputs(bus):
    panel, nuis = bus
    with pytest.raises(ValueError):
        orthomoment.orthogonality_check(panel, THETAS, nuis, "ccp", SIM, MomentConfig(), r_grid=[0, 0.1])
    with pytest.raises(ValueError):
        perturb(nuis, "utility", 0.1)
    with pytest.raises(ValueError):
        MomentConfig(form="other")
    with pytest.raises(ValueError):
        MomentConfig(pi_method="fd", h_fd=1e-4)


def test_occupancy_weights_reproduce_simulated_costs(small_model, small_table):
    # E_mu[dV_sigma/dtheta] = -E_mu[omega_sigma * d(flow)/dtheta] for each deviation policy
    panel = dgp.simulate_panel(small_model, dgp.default_truth(), 3000, 2, table=small_table)
    nuis = valuesim.oracle_tables(small_model, small_table, panel.x)
    pols = valuesim.default_deviations()
    om = occupancy_ratios(small_model, nuis, np.arange(len(panel)), panel.s, pols)
    for j, pol in enumerate(pols):
        b = valuesim.forward_value_basis(panel.s, pol, nuis, small_model, valuesim.SimConfig(n_paths=40))
        p = pol.choice_prob(nuis.gamma(panel.s))
        for lhs, rhs in ((b.psi1[:, 0], -om[:, j] * (1 - p)), (b.psi1[:, 1], -om[:, j] * panel.s * p)):
            d = lhs - rhs
            assert abs(d.mean()) < 4 * d.std() / np.sqrt(d.size)


def test_observed_policy_occupancy_is_geometric(bus, small_model):
    panel, nuis = bus
    om = occupancy_ratios(small_model, nuis, np.arange(len(panel)), panel.s, (valuesim.OPTIMAL_POLICY,))
    assert np.allclose(om, 1 / (1 - small_model.beta), rtol=1e-6)


def test_transition_score_matches_finite_difference(bus):
    panel, nuis = bus
    base = MomentConfig(policies=(valuesim.PolicySpec(valuesim.COIN),))
    sim = valuesim.SimConfig(n_paths=2000)
    sub = panel.subset(np.arange(10))
    nu = nuis.take(np.arange(10))
    # the same corrections with Pi from the score and from central differences
    a = build_moments(sub, nu, sim, base).parts["trans"]
    b = build_moments(sub, nu, sim, MomentConfig(policies=base.policies, pi_method="fd", h_fd=0.2)).parts["trans"]
    scale = np.abs(b).mean()
    assert np.abs(a - b).mean() < 0.25 * scale


def test_entry_game_corrections_are_consistent():
    model = dgp.default_model(dgp.ENTRY, d_x=4)
    truth = dgp.default_truth(dgp.ENTRY)
    table = dgp.OracleTable(model, truth)
    panel = dgp.simulate_panel(model, truth, 60, 3, table=table)
    nuis = valuesim.oracle_tables(model, table, panel.x)
    ev = build_moments(panel, nuis, SIM, MomentConfig())
    assert ev.m.shape == (60, 3, 4)
    assert np.all(ev.parts["trans"] == 0)
    assert np.any(ev.parts["opp"] != 0)
    flip = build_moments(panel, nuis, SIM, MomentConfig().flipped())
    assert np.allclose(flip.parts["opp"], -ev.parts["opp"])


def test_closed_form_gamma_terms(bus, small_model):
    panel, nuis = bus
    obs = orthomoment._observation_inputs(panel, nuis, np.arange(len(panel)))
    c1 = np.zeros((len(panel), 3))
    gb = orthomoment.gamma_big(small_model, obs, c1, c1)
    g = obs["gamma"]
    assert np.allclose(gb[:, 0], 1.0) and np.allclose(gb[:, 1], -panel.s)
    assert np.allclose(gb[:, 2], -2 / g - np.log(g / (1 - g)))


def test_one_period_coin_moment_is_analytic():
    model = dgp.default_model(d_x=3, beta=0.0)
    truth = dgp.default_truth()
    table = dgp.OracleTable(model, truth)
    panel = dgp.simulate_panel(model, truth, 20, 1, table=table)
    nuis = valuesim.oracle_tables(model, table, panel.x)
    cfg = MomentConfig(policies=(valuesim.PolicySpec(valuesim.COIN),)).naive()
    ev = build_moments(panel, nuis, valuesim.SimConfig(n_paths=20000), cfg)
    R, mu = truth.theta()
    g = nuis.gamma(panel.s)
    # the coin ignores the shocks, so its chosen shock has the plain Gumbel mean
    coin = -0.5 * R - 0.5 * mu * panel.s + dgp.EULER_GAMMA
    star = -(1 - g) * R - g * mu * panel.s + valuesim.selected_shock_mean(g)
    got = ev.values(truth.theta(), "m")[0, :, 0]
    assert np.all(np.abs(got - (coin - star)) < 0.1)


def test_transition_correction_vanishes_at_mean_and_without_discounting(bus, small_model):
    from dataclasses import replace
    panel, nuis = bus
    cfg = MomentConfig()
    pols = (valuesim.OPTIMAL_POLICY,) + cfg.policies
    n = len(panel)
    sims = {(j, name): np.ones((n, 3)) for j in range(len(pols)) for name in ("C1", "C0", "Pi")}
    omega = np.ones((n, len(cfg.policies)))
    obs = orthomoment._observation_inputs(panel, nuis, np.arange(n))
    parts = orthomoment._exact_parts(replace(small_model, beta=0.0), cfg, obs, sims, pols, omega)
    assert np.all(parts["trans"] == 0.0)
    # next mileage equal to its conditional mean under the nuisance law
    obs["s_next"] = dgp.clipped_mean(obs["rho"], obs["sig"], small_model.s_lo, small_model.s_hi)
    parts = orthomoment._exact_parts(small_model, cfg, obs, sims, pols, omega)
    assert np.allclose(parts["trans"], 0.0)


def test_entry_opponent_term_vanishes_without_competition_effect():
    model = dgp.default_model(dgp.ENTRY, d_x=4)
    truth = dgp.default_truth(dgp.ENTRY)
    table = dgp.OracleTable(model, truth)
    panel = dgp.simulate_panel(model, truth, 40, 2, table=table)
    nuis = valuesim.oracle_tables(model, table, panel.x)
    ev = build_moments(panel, nuis, SIM, MomentConfig())
    # delta1 = delta0 (theta_3 = 0) with delta0 = 0
    vals = orthomoment.affine_eval(ev.parts["opp"], np.array([[5.0, 1.0, 0.0]]))
    assert np.allclose(vals, 0.0)
