"""Structural models, equilibrium data generation and the dynamic-programming oracle.

Two models share the machinery here.  In the bus model, keeping the engine
(a = 1) costs ``mu * s`` and moves mileage to ``rho(w) + e``.  Replacing it
(a = 0) costs ``R`` and resets mileage to 1.  The entry game adds a
short-lived opponent whose action ``a_p`` shifts the flow utility by
``delta_a * a_p``; its mileage moves deterministically.

Continuous mileage is handled on a uniform grid with linear interpolation.
The expectation over the clipped Gaussian transition is taken exactly for the
piecewise-linear interpolant, so the oracle is exact for the discretized model
that the simulator also uses.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, logsumexp
from scipy.stats import norm

from . import rng

EULER_GAMMA = float(np.euler_gamma)
BUS, ENTRY = "bus", "entry"

# stream purposes for the data generating process
_STREAM_X, _STREAM_DYN = 0, 1


def _default_b(d_x, scale=0.5, sign=False):
    b = np.zeros(d_x)
    for j in range(1, min(5, d_x) + 1):
        b[j - 1] = scale / j * ((-1) ** (j + 1) if sign else 1.0)
    return tuple(b)


@dataclass(frozen=True, order=True)
class StructuralParams:
    """Cost parameters; ``delta0``/``delta1`` only matter for the entry game."""

    R: float = 5.0
    mu: float = 1.0
    delta0: Optional[float] = None
    delta1: Optional[float] = None

    def __post_init__(self):
        vals = [self.R, self.mu] + [v for v in (self.delta0, self.delta1) if v is not None]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("structural parameters must be finite")
        if self.R < 0 or self.mu < 0:
            raise ValueError("R and mu must be nonnegative")

    def theta(self, kind=BUS):
        if kind == ENTRY:
            return np.array([self.R, self.mu, self.delta1 - self.delta0])
        return np.array([self.R, self.mu])


@dataclass(frozen=True)
class ModelSpec:
    beta: float = 0.9
    d_w: int = 51
    s_lo: float = 0.0
    s_hi: float = 15.0
    b: tuple = field(default_factory=lambda: _default_b(50))
    autoreg: float = 0.7
    intercept: float = 1.0
    noise_std: float = 0.5
    kind: str = BUS
    b_opp: tuple = field(default_factory=lambda: _default_b(50, 0.8, sign=True))
    delta0: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if not self.s_lo < self.s_hi:
            raise ValueError("mileage bounds must satisfy s_lo < s_hi")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        if self.kind not in (BUS, ENTRY):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if len(self.b) != self.d_x or (self.kind == ENTRY and len(self.b_opp) != self.d_x):
            raise ValueError("coefficient vectors must have length d_w - 1")
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))
        object.__setattr__(self, "b_opp", tuple(float(v) for v in self.b_opp))

    @property
    def d_x(self):
        return self.d_w - 1

    @property
    def dim_theta(self):
        return 3 if self.kind == ENTRY else 2

    def rho(self, s, z):
        """True transition mean given mileage and the index ``z = x'b``."""
        return np.minimum(self.s_hi, self.autoreg * np.asarray(s) + z + self.intercept)

    def opp_prob(self, x):
        return expit(np.asarray(x) @ np.asarray(self.b_opp))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["b"] = tuple(d["b"])
        d["b_opp"] = tuple(d["b_opp"])
        return cls(**d)


def default_model(kind=BUS, d_x=50, **kw):
    return ModelSpec(d_w=d_x + 1, b=_default_b(d_x), b_opp=_default_b(d_x, 0.8, sign=True), kind=kind, **kw)


def default_truth(kind=BUS):
    if kind == ENTRY:
        return StructuralParams(5.0, 1.0, 0.0, 0.5)
    return StructuralParams(5.0, 1.0)


# ---------------------------------------------------------------------------
# dynamic programming oracle

def mileage_grid(model, grid_size=200):
    if model.kind == ENTRY:
        return np.arange(model.s_lo, model.s_hi + 1.0)
    return np.linspace(model.s_lo, model.s_hi, grid_size)


def _hinge_mean(m, c, sd):
    """E[(m + sd * e - c)_+] for standard normal e."""
    u = (m - c) / sd
    return (m - c) * norm.cdf(u) + sd * norm.pdf(u)


def clipped_mean(m, sd, lo, hi):
    """E[clip(m + sd * e, lo, hi)] for standard normal e."""
    return lo + _hinge_mean(m, lo, sd) - _hinge_mean(m, hi, sd)


def clipped_slope(m, sd, lo, hi):
    """d/dm of ``clipped_mean``: the probability of landing strictly inside (lo, hi)."""
    return norm.cdf((hi - m) / sd) - norm.cdf((lo - m) / sd)


def transition_operator(grid, means, sd):
    """Rows map grid values to E[f(clip(mean + sd*e))] for the linear interpolant f.

    ``means`` has shape (..., G); the result has shape (..., G, G).
    """
    h = grid[1] - grid[0]
    psi = _hinge_mean(means[..., None], grid, sd)
    w = np.empty_like(psi)
    w[..., 1:-1] = (psi[..., :-2] - 2.0 * psi[..., 1:-1] + psi[..., 2:]) / h
    w[..., 0] = 1.0 - (psi[..., 0] - psi[..., 1]) / h
    w[..., -1] = (psi[..., -2] - psi[..., -1]) / h
    return w


@dataclass
class DPOracle:
    """Choice-specific values on the mileage grid for a batch of agents."""

    s_grid: np.ndarray
    v0: np.ndarray
    v1: np.ndarray
    iterations: int = 0
    residual: float = 0.0

    @property
    def gap(self):
        return self.v1 - self.v0

    @property
    def gamma(self):
        return expit(self.gap)

    @property
    def value(self):
        return logsumexp(np.stack([self.v0, self.v1]), axis=0) + EULER_GAMMA

    def gamma_at(self, s, rows=None):
        return expit(interp_rows(self.gap, self.s_grid, s, rows))


def interp_rows(tab, grid, s, rows=None):
    """Row-wise linear interpolation on a uniform grid (kernel convention)."""
    tab = np.atleast_2d(tab)
    s = np.asarray(s, dtype=float)
    if rows is None:
        rows = np.zeros(s.shape, dtype=np.int64) if tab.shape[0] == 1 else np.arange(tab.shape[0])
    g = tab.shape[1]
    u = (s - grid[0]) * (1.0 / (grid[1] - grid[0]))
    fj = np.clip(np.floor(u), 0, g - 2)
    j = fj.astype(np.int64)
    w = u - fj
    return (1.0 - w) * tab[rows, j] + w * tab[rows, j + 1]


def _iterate(v_bar, bellman, dp_tol, max_iter):
    for it in range(1, max_iter + 1):
        v0, v1 = bellman(v_bar)
        new = np.logaddexp(v0, v1) + EULER_GAMMA
        diff = np.max(np.abs(new - v_bar))
        v_bar = new
        if diff < dp_tol:
            v0, v1 = bellman(v_bar)
            return v0, v1, it, diff
    raise RuntimeError(f"value iteration did not converge in {max_iter} iterations "
                       f"(last change {diff:.3g}); beta too close to 1 or grid too coarse")


def solve_bus_dp(model, truth, z, grid_size=200, dp_tol=1e-10, max_iter=20000):
    """Bus-model oracle for a batch of transition indices ``z = x'b``."""
    if grid_size < 50:
        raise ValueError("grid_size must be at least 50")
    if dp_tol <= 0:
        raise ValueError("dp_tol must be positive")
    z = np.atleast_1d(np.asarray(z, dtype=float))
    grid = mileage_grid(model, grid_size)
    means = model.rho(grid[None, :], z[:, None])
    if np.any(means > model.s_hi + 1e-12) or np.any(means < model.s_lo - 6 * model.noise_std):
        raise ValueError("mileage bounds do not cover the simulated transitions")
    ops = transition_operator(grid, means, model.noise_std)
    reset = np.searchsorted(grid, 1.0)
    if not np.isclose(grid[reset], 1.0):
        ops_reset = None
        k = int(np.floor((1.0 - grid[0]) / (grid[1] - grid[0])))
        wr = (1.0 - grid[k]) / (grid[1] - grid[0])
    beta = model.beta
    u0 = -truth.R
    u1 = -truth.mu * grid[None, :]

    def bellman(v_bar):
        if np.isclose(grid[reset], 1.0):
            v_reset = v_bar[:, reset]
        else:
            v_reset = (1.0 - wr) * v_bar[:, k] + wr * v_bar[:, k + 1]
        v0 = u0 + beta * np.broadcast_to(v_reset[:, None], v_bar.shape)
        v1 = u1 + beta * np.einsum("zij,zj->zi", ops, v_bar)
        return v0, v1

    v_bar = np.zeros((z.size, grid.size))
    v0, v1, it, diff = _iterate(v_bar, bellman, dp_tol, max_iter)
    return DPOracle(grid, v0, v1, it, diff)


def solve_entry_dp(model, truth, p_opp, dp_tol=1e-10, max_iter=20000):
    """Entry-game oracle for a batch of opponent entry probabilities."""
    p_opp = np.atleast_1d(np.asarray(p_opp, dtype=float))
    grid = mileage_grid(model)
    nxt = np.minimum(np.arange(grid.size) + 1, grid.size - 1)
    reset = int(np.searchsorted(grid, 1.0))
    beta = model.beta
    u0 = -truth.R + truth.delta0 * p_opp[:, None]
    u1 = -truth.mu * grid[None, :] + truth.delta1 * p_opp[:, None]

    def bellman(v_bar):
        v0 = u0 + beta * v_bar[:, [reset]]
        v1 = u1 + beta * v_bar[:, nxt]
        return np.broadcast_to(v0, v_bar.shape), v1

    v_bar = np.zeros((p_opp.size, grid.size))
    v0, v1, it, diff = _iterate(v_bar, bellman, dp_tol, max_iter)
    return DPOracle(grid, np.array(v0), v1, it, diff)


def solve_dp(model, truth, x, grid_size=200, dp_tol=1e-10, max_iter=20000):
    """Oracle for one agent (``x`` of length d_x) or a batch (rows of ``x``)."""
    x = np.asarray(x, dtype=float)
    x2 = np.atleast_2d(x)
    if x2.shape[1] != model.d_x:
        raise ValueError("x has the wrong dimension")
    if model.kind == ENTRY:
        return solve_entry_dp(model, truth, model.opp_prob(x2), dp_tol, max_iter)
    return solve_bus_dp(model, truth, x2 @ np.asarray(model.b), grid_size, dp_tol, max_iter)


class OracleTable:
    """Oracle values for every agent of a model, tabulated over the index z = x'b.

    Bus-model agents differ only through ``z``; values are solved on a z-grid
    and interpolated linearly.  Entry-game agents are solved exactly.
    """

    def __init__(self, model, truth, grid_size=200, z_nodes=241, z_sd=6.0, dp_tol=1e-10):
        self.model, self.truth = model, truth
        self.grid_size = grid_size
        self.dp_tol = dp_tol
        self.s_grid = mileage_grid(model, grid_size)
        if model.kind == BUS:
            scale = float(np.linalg.norm(model.b)) or 1.0
            self.z_grid = np.linspace(-z_sd * scale, z_sd * scale, z_nodes)
            self.dp = solve_bus_dp(model, truth, self.z_grid, grid_size, dp_tol)

    def oracle(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.model.kind == ENTRY:
            return solve_entry_dp(self.model, self.truth, self.model.opp_prob(x), self.dp_tol)
        z = x @ np.asarray(self.model.b)
        zg = self.z_grid
        if np.any(z < zg[0]) or np.any(z > zg[-1]):
            raise ValueError("agent index outside the tabulated range; widen z_sd")
        u = (z - zg[0]) / (zg[1] - zg[0])
        j = np.clip(np.floor(u).astype(np.int64), 0, zg.size - 2)
        w = (u - j)[:, None]
        v0 = (1 - w) * self.dp.v0[j] + w * self.dp.v0[j + 1]
        v1 = (1 - w) * self.dp.v1[j] + w * self.dp.v1[j + 1]
        return DPOracle(self.s_grid, v0, v1, self.dp.iterations, self.dp.residual)


# ---------------------------------------------------------------------------
# data

@dataclass
class PanelDataset:
    """One observation ``(s, x, a, s_next)`` per agent; ``a_p`` for the entry game."""

    s: np.ndarray
    x: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    model: ModelSpec
    truth: StructuralParams
    seed: int
    a_p: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.s.shape[0] == 0:
            raise ValueError("empty panel")

    def __len__(self):
        return self.s.shape[0]

    @property
    def w(self):
        return np.column_stack([self.s, self.x])

    def subset(self, idx):
        idx = np.asarray(idx)
        return PanelDataset(self.s[idx], self.x[idx], self.a[idx], self.s_next[idx],
                            self.model, self.truth, self.seed,
                            None if self.a_p is None else self.a_p[idx])


def draw_covariates(model, n, seed):
    agents = np.arange(n, dtype=np.uint64)[:, None]
    key = rng.stream_key(seed, agents, _STREAM_X)
    j = np.arange(model.d_x, dtype=np.uint64)[None, :]
    return rng.normal(key, 2 * j, 2 * j + 1)


def simulate_panel(model, truth, N, seed, T_burn=50, table=None):
    """Draw one observation per agent after ``T_burn`` equilibrium steps from s = 1."""
    if N < 1:
        raise ValueError("N must be at least 1")
    table = table or OracleTable(model, truth)
    x = draw_covariates(model, N, seed)
    orc = table.oracle(x)
    gap = orc.gap
    key = rng.stream_key(seed, np.arange(N, dtype=np.uint64), _STREAM_DYN)
    z = x @ np.asarray(model.b)
    p_opp = model.opp_prob(x) if model.kind == ENTRY else None
    s = np.ones(N)
    for t in range(T_burn + 1):
        c = np.uint64(t * rng.SLOTS_PER_STEP)
        gam = expit(interp_rows(gap, orc.s_grid, s))
        a = rng.uniform(key, c + np.uint64(rng.SLOT_EPS0)) < gam
        if model.kind == ENTRY:
            a_p = rng.uniform(key, c + np.uint64(rng.SLOT_OPP)) < p_opp
            nxt = np.where(a, np.minimum(s + 1.0, model.s_hi), 1.0)
        else:
            e = rng.normal(key, c + np.uint64(rng.SLOT_N1), c + np.uint64(rng.SLOT_N2))
            moved = np.clip(model.rho(s, z) + model.noise_std * e, model.s_lo, model.s_hi)
            nxt = np.where(a, moved, 1.0)
        if t < T_burn:
            s = nxt
    return PanelDataset(s, x, a.astype(np.int64), nxt, model, truth, seed,
                        a_p.astype(np.int64) if model.kind == ENTRY else None)


def conditional_outcomes(panel, table=None):
    """Panel whose outcomes are replaced by their conditional means given w.

    ``a`` becomes gamma_0(w), ``s_next`` becomes E[s' | w, a = 1] and ``a_p``
    the opponent's entry probability.  Any statistic linear in (a, a s', a_p)
    then averages its exact conditional expectation over the observed states.
    """
    model = panel.model
    table = table or OracleTable(model, panel.truth)
    orc = table.oracle(panel.x)
    gam = expit(interp_rows(orc.gap, orc.s_grid, panel.s))
    if model.kind == ENTRY:
        nxt = np.minimum(panel.s + 1.0, model.s_hi)
        a_p = model.opp_prob(panel.x)
    else:
        m = model.rho(panel.s, panel.x @ np.asarray(model.b))
        sd = model.noise_std
        nxt = clipped_mean(m, sd, model.s_lo, model.s_hi)
        a_p = None
    return PanelDataset(panel.s, panel.x, gam, nxt, model, panel.truth, panel.seed, a_p)


# ---------------------------------------------------------------------------
# serialization

def save_panel(panel, path):
    """CSV with 17 significant digits plus a JSON sidecar (``path + '.json'``)."""
    d_x = panel.x.shape[1]
    cols = ["agent", "s"] + [f"x_{j}" for j in range(d_x)] + ["a"]
    if panel.a_p is not None:
        cols.append("a_p")
    cols.append("s_next")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(len(panel)):
            row = [str(i), repr(float(panel.s[i]))]
            row += [repr(float(v)) for v in panel.x[i]]
            row.append(str(int(panel.a[i])))
            if panel.a_p is not None:
                row.append(str(int(panel.a_p[i])))
            row.append(repr(float(panel.s_next[i])))
            fh.write(",".join(row) + "\n")
    side = {"model": panel.model.to_dict(), "truth": asdict(panel.truth), "seed": panel.seed}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)


def load_panel(path):
    with open(str(path) + ".json", encoding="utf-8") as fh:
        side = json.load(fh)
    model = ModelSpec.from_dict(side["model"])
    truth = StructuralParams(**side["truth"])
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    expected = ["agent", "s"] + [f"x_{j}" for j in range(model.d_x)] + ["a"]
    expected += (["a_p"] if model.kind == ENTRY else []) + ["s_next"]
    if header != expected:
        raise ValueError("panel header does not match the model in the sidecar")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    x = data[:, 2:2 + model.d_x]
    a_p = data[:, -2].astype(np.int64) if model.kind == ENTRY else None
    return PanelDataset(data[:, 1], x, data[:, 2 + model.d_x].astype(np.int64), data[:, -1],
                        model, truth, side["seed"], a_p)


def stationary_check(panel, table):
    """Mean of 1{a=1} and the oracle mean of gamma_0 over the panel's states."""
    orc = table.oracle(panel.x)
    return float(panel.a.mean()), float(orc.gamma_at(panel.s).mean())


def clipped_mass(panel):
    """Average probability that a keep transition from the panel's states is clipped."""
    m = panel.model
    if m.kind == ENTRY:
        return 0.0
    mean = m.rho(panel.s, panel.x @ np.asarray(m.b))
    mass = norm.cdf((m.s_lo - mean) / m.noise_std) + norm.sf((m.s_hi - mean) / m.noise_std)
    return float(np.mean(mass))


# ---------------------------------------------------------------------------
# population identified set

@dataclass
class IdentifiedSet:
    """Oracle moment means, affine in theta, and the grid points satisfying them."""

    mean: np.ndarray      # (L, k+1)
    cov: np.ndarray       # (L, k+1, k+1) covariance of the mean's coefficients
    members: np.ndarray   # boolean mask over grid points
    points: np.ndarray    # grid points
    n_obs: int
    n_paths: int
    n_se: float = 3.0

    def at(self, theta):
        th = np.atleast_2d(theta)
        t1 = np.hstack([th, np.ones((th.shape[0], 1))])
        mean = t1 @ self.mean.T
        se = np.sqrt(np.maximum(np.einsum("tj,ljk,tk->tl", t1, self.cov, t1), 0.0))
        return mean, se

    @property
    def member_points(self):
        return self.points[self.members]

    def to_json(self, path):
        d = {"mean": self.mean.tolist(), "cov": self.cov.tolist(),
             "members": np.flatnonzero(self.members).tolist(), "points": self.points.tolist(),
             "n_obs": self.n_obs, "n_paths": self.n_paths, "n_se": self.n_se}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(d, fh)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        pts = np.asarray(d["points"], dtype=float)
        mask = np.zeros(len(pts), bool)
        mask[d["members"]] = True
        return cls(np.asarray(d["mean"]), np.asarray(d["cov"]), mask, pts,
                   d["n_obs"], d["n_paths"], d["n_se"])


def true_identified_set(model, truth, points, moment_config=None, n_obs=40_000, n_paths=100,
                        seed=12345, table=None, n_se=3.0):
    """Grid points whose population moments are all <= n_se Monte Carlo SEs.

    Moments are simulated with the true CCPs and transition law from a large
    stationary sample of starting states, so the means are affine in theta
    and one simulation pass covers the whole grid.
    """
    from .orthomoment import MomentConfig, build_moments
    from .valuesim import SimConfig, oracle_tables

    if n_obs * n_paths < 100_000:
        raise ValueError("need at least 1e5 simulated paths")
    cfg = (moment_config or MomentConfig()).naive()
    table = table or OracleTable(model, truth)
    panel = simulate_panel(model, truth, n_obs, seed, table=table)
    nuis = oracle_tables(model, table, panel.x)
    ev = build_moments(panel, nuis, SimConfig(n_paths=n_paths, base_seed=seed + 1), cfg)
    aff = ev.m
    mean = aff.mean(axis=0)
    c = aff - mean
    cov = np.einsum("nlj,nlk->ljk", c, c) / (n_obs - 1) / n_obs
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = IdentifiedSet(mean, cov, np.zeros(len(points), bool), points, n_obs, n_paths, n_se)
    mu, se = out.at(points)
    out.members = np.all(mu <= n_se * se, axis=1)
    mu0, se0 = out.at(truth.theta(model.kind))
    if not np.all(mu0 <= n_se * se0):
        raise RuntimeError("true parameter violates the oracle moments; simulation bug or too few draws")
    return out
