import numpy as np
import pytest
from scipy.stats import norm

from orthoddc import dgp, valuesim


def _quad_clipped(f, m, sd, lo, hi, n=400_001):
    e = np.linspace(-9.0, 9.0, n)
    w = norm.pdf(e)
    w /= w.sum()
    return float(np.sum(w * f(np.clip(m + sd * e, lo, hi))))


@pytest.mark.parametrize("m", [-1.0, 0.3, 4.0, 14.8])
def test_clipped_mean_and_slope_match_quadrature(m):
    sd, lo, hi = 0.5, 0.0, 15.0
    want = _quad_clipped(lambda v: v, m, sd, lo, hi)
    assert abs(dgp.clipped_mean(m, sd, lo, hi) - want) < 1e-6
    h = 1e-4
    fd = (dgp.clipped_mean(m + h, sd, lo, hi) - dgp.clipped_mean(m - h, sd, lo, hi)) / (2 * h)
    assert abs(dgp.clipped_slope(m, sd, lo, hi) - fd) < 1e-6


def test_transition_operator_integrates_interpolant():
    model = dgp.default_model(d_x=5)
    grid = dgp.mileage_grid(model, 60)
    f = np.sin(grid) + 0.1 * grid ** 2
    means = np.array([[-0.4, 2.0, 9.3, 14.9]])
    ops = dgp.transition_operator(grid, means, model.noise_std)[0]
    assert np.allclose(ops.sum(axis=1), 1.0, atol=1e-12)
    for i, m in enumerate(means[0]):
        want = _quad_clipped(lambda v: np.interp(v, grid, f), m, model.noise_std, 0.0, 15.0)
        assert abs(ops[i] @ f - want) < 1e-6


def test_oracle_satisfies_bellman_and_hotz_miller(small_model):
    truth = dgp.default_truth()
    orc = dgp.solve_dp(small_model, truth, np.zeros(small_model.d_x))
    gap = valuesim.hotz_miller_gap(np.clip(orc.gamma, 1e-300, 1 - 1e-16))
    ok = (orc.gamma > 1e-12) & (orc.gamma < 1 - 1e-12)
    assert np.max(np.abs(gap[ok] - orc.gap[ok])) < 1e-6
    assert orc.residual < 1e-10
    # replacement value does not depend on mileage
    assert np.ptp(orc.v0) < 1e-12


def test_oracle_value_matches_forward_simulation(small_model, small_table):
    x = np.zeros((3, small_model.d_x))
    s0 = np.array([1.0, 4.0, 8.5])
    nuis = valuesim.oracle_tables(small_model, small_table, x)
    sim = valuesim.SimConfig(n_paths=4000, tol_tail=1e-4)
    basis = valuesim.forward_value_basis(s0, valuesim.OPTIMAL_POLICY, nuis, small_model, sim)
    v = basis.value(dgp.default_truth().theta())
    orc = small_table.oracle(x)
    want = dgp.interp_rows(orc.value, orc.s_grid, s0)
    # Monte Carlo SE of a 4000-path value is about 0.1 here
    assert np.all(np.abs(v - want) < 0.35)


def test_panel_is_deterministic_and_seed_dependent(small_model, small_table):
    truth = dgp.default_truth()
    p1 = dgp.simulate_panel(small_model, truth, 200, 3, table=small_table)
    p2 = dgp.simulate_panel(small_model, truth, 200, 3, table=small_table)
    p3 = dgp.simulate_panel(small_model, truth, 200, 4, table=small_table)
    for name in ("s", "x", "a", "s_next"):
        assert np.array_equal(getattr(p1, name), getattr(p2, name))
    assert not np.array_equal(p1.s, p3.s)
    # a prefix of agents does not depend on N
    p4 = dgp.simulate_panel(small_model, truth, 50, 3, table=small_table)
    assert np.array_equal(p4.s, p1.s[:50])


def test_panel_respects_bounds_and_law(small_panel):
    m = small_panel.model
    assert np.all((small_panel.s >= m.s_lo) & (small_panel.s <= m.s_hi))
    assert np.all(small_panel.s_next[small_panel.a == 0] == 1.0)
    assert set(np.unique(small_panel.a)) <= {0, 1}


def test_save_load_roundtrip(tmp_path, small_panel):
    path = tmp_path / "panel.csv"
    dgp.save_panel(small_panel, path)
    back = dgp.load_panel(path)
    for name in ("s", "x", "a", "s_next"):
        assert np.array_equal(getattr(back, name), getattr(small_panel, name))
    assert back.model == small_panel.model and back.truth == small_panel.truth
    path2 = tmp_path / "again.csv"
    dgp.save_panel(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_entry_panel_roundtrip(tmp_path):
    model = dgp.default_model(dgp.ENTRY, d_x=4)
    panel = dgp.simulate_panel(model, dgp.default_truth(dgp.ENTRY), 100, 1)
    dgp.save_panel(panel, tmp_path / "e.csv")
    back = dgp.load_panel(tmp_path / "e.csv")
    assert np.array_equal(back.a_p, panel.a_p)
    assert np.all(panel.s_next[panel.a == 1] == np.minimum(panel.s[panel.a == 1] + 1, model.s_hi))


def test_stationary_share_matches_ccp(small_model, small_table):
    panel = dgp.simulate_panel(small_model, dgp.default_truth(), 20_000, 11, table=small_table)
    share, mean_gamma = dgp.stationary_check(panel, small_table)
    se = np.sqrt(share * (1 - share) / len(panel))
    assert abs(share - mean_gamma) < 4 * se


def test_conditional_outcomes_replace_outcomes(small_panel, small_table):
    c = dgp.conditional_outcomes(small_panel, small_table)
    assert np.all((c.a > 0) & (c.a < 1))
    assert np.array_equal(c.s, small_panel.s)


def test_validation_errors(small_model):
    with pytest.raises(ValueError):
        dgp.ModelSpec(beta=1.0)
    with pytest.raises(ValueError):
        dgp.StructuralParams(R=-1.0)
    with pytest.raises(ValueError):
        dgp.StructuralParams(mu=float("nan"))
    with pytest.raises(ValueError):
        dgp.solve_bus_dp(small_model, dgp.default_truth(), [0.0], grid_size=10)
    with pytest.raises(ValueError):
        dgp.simulate_panel(small_model, dgp.default_truth(), 0, 1)
    with pytest.raises(ValueError):
        dgp.solve_dp(small_model, dgp.default_truth(), np.zeros(3))


def test_keep_value_decreases_with_mileage(small_model):
    orc = dgp.solve_dp(small_model, dgp.default_truth(), np.zeros((3, small_model.d_x)))
    assert np.all(np.diff(orc.v1, axis=1) <= 1e-12)


def test_identified_set_oracle(small_model, small_table):
    truth = dgp.default_truth()
    pts = np.array([[5.0, 1.0], [5000.0, 1.0], [0.0, 3.0]])
    ids = dgp.true_identified_set(small_model, truth, pts, n_obs=2000, n_paths=50, table=small_table)
    assert ids.members.tolist()[:2] == [True, False]
    only = dgp.true_identified_set(small_model, truth, pts[:1], n_obs=2000, n_paths=50, table=small_table)
    assert only.members.tolist() == [True]
    with pytest.raises(ValueError):
        dgp.true_identified_set(small_model, truth, pts, n_obs=100, n_paths=10)
