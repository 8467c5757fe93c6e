"""Markov policies, Hotz-Miller inversion and forward simulation of value bases.

Flow utility is linear in the cost parameters, so one simulation pass yields
a basis ``(psi1, psi2)`` with ``V(theta) = theta @ psi1 + psi2``.  ``psi1``
collects the discounted coefficients of theta.  ``psi2`` collects the
discounted shock of the chosen action, plus ``delta0 * a_p`` in the entry game.
All rollouts of one start state read the same shock block, so comparisons
across policies, theta and nuisance values use common random numbers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from . import backend
from .dgp import BUS, ENTRY, EULER_GAMMA, OracleTable, interp_rows, mileage_grid

OPTIMAL, COIN, DEVIATION = "optimal", "coin", "deviation"


@dataclass(frozen=True)
class PolicySpec:
    """Cutoff policy shifted by ``dev0`` on the a = 0 side, or a fair coin."""

    kind: str = OPTIMAL
    dev0: float = 0.0

    def __post_init__(self):
        if self.kind not in (OPTIMAL, COIN, DEVIATION):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind != DEVIATION and self.dev0 != 0.0:
            raise ValueError("only deviation policies carry a shift")

    @property
    def is_coin(self):
        return self.kind == COIN

    @property
    def label(self):
        if self.kind == DEVIATION:
            return f"dev{self.dev0:+g}"
        return self.kind

    def choice_prob(self, gamma):
        """Pr(a = 1 | w) induced by the policy when the CCP is ``gamma``."""
        gamma = np.asarray(gamma, dtype=float)
        if self.is_coin:
            return np.full_like(gamma, 0.5)
        return expit(logit(gamma) - self.dev0)

    def dprob_dgamma(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        if self.is_coin:
            return np.zeros_like(gamma)
        p = self.choice_prob(gamma)
        return p * (1.0 - p) / (gamma * (1.0 - gamma))


OPTIMAL_POLICY = PolicySpec(OPTIMAL)


def default_deviations():
    """Coin toss, replace-prone shift +1, replace-averse shift -1."""
    return (PolicySpec(COIN), PolicySpec(DEVIATION, 1.0), PolicySpec(DEVIATION, -1.0))


def hotz_miller_gap(gamma):
    """v(1, w) - v(0, w) implied by the CCP under logit shocks."""
    gamma = np.asarray(gamma, dtype=float)
    if np.any((gamma <= 0.0) | (gamma >= 1.0)):
        raise ValueError("CCP must lie strictly inside (0, 1); clip it first")
    out = np.log(gamma / (1.0 - gamma))
    return out if out.ndim else float(out)


def act(policy, gamma, eps0, eps1, coin_u=None):
    """Action taken by ``policy`` given CCP ``gamma`` and shocks ``(eps0, eps1)``."""
    if policy.is_coin:
        if coin_u is None:
            raise ValueError("coin toss needs its own uniform draw")
        return (np.asarray(coin_u) < 0.5).astype(np.int64)
    gap = hotz_miller_gap(gamma)
    return (np.asarray(eps1) - np.asarray(eps0) >= policy.dev0 - gap).astype(np.int64)


def expected_selected_shock(gamma):
    """-log g - (1 - g) log((1 - g)/g), the closed form for the optimal cutoff.

    This equals E[(eps1 - eps0) 1{eps1 - eps0 >= -logit g}]; the mean of the
    chosen shock itself is ``selected_shock_mean``.
    """
    g = np.asarray(gamma, dtype=float)
    return -np.log(g) - (1.0 - g) * np.log((1.0 - g) / g)


def expected_selected_shock_derivative(gamma):
    """-2/g - log(g/(1 - g)), the closed-form Gamma term; not the calculus derivative above."""
    g = np.asarray(gamma, dtype=float)
    return -2.0 / g - np.log(g / (1.0 - g))


def selected_shock_mean(p):
    """E[eps(chosen)] for a cutoff rule with choice probability ``p``.

    Euler's constant plus the binary entropy; its derivative is ``-logit(p)``.
    """
    p = np.asarray(p, dtype=float)
    return EULER_GAMMA - p * np.log(p) - (1.0 - p) * np.log1p(-p)


@dataclass(frozen=True)
class SimConfig:
    """Forward-simulation settings; the horizon follows from ``tol_tail``."""

    n_paths: int = 300
    tol_tail: float = 1e-3
    pi_max: float = 55.0
    base_seed: int = 0
    antithetic: bool = True
    horizon_override: Optional[int] = None
    chunk_bytes: int = 1 << 27

    def __post_init__(self):
        if self.n_paths < 1 or (self.antithetic and self.n_paths % 2):
            raise ValueError("n_paths must be positive (and even with antithetic pairs)")
        if self.tol_tail <= 0 or self.pi_max <= 0:
            raise ValueError("tol_tail and pi_max must be positive")

    def horizon(self, beta):
        if self.horizon_override is not None:
            return int(self.horizon_override)
        if beta == 0.0:
            return 1
        return max(1, math.ceil(math.log(self.tol_tail * (1.0 - beta) / self.pi_max) / math.log(beta)))

    def tail_bound(self, beta):
        return beta ** self.horizon(beta) * self.pi_max / (1.0 - beta)


@dataclass
class NuisanceTables:
    """Nuisance functions tabulated per row on a uniform mileage grid.

    ``logit`` holds the own CCP on the logit scale (clipped to
    ``+-logit_cap`` when evaluated), ``rho`` the transition mean, ``sig`` the
    transition noise scale, ``opp`` the opponent entry probability.  Linear
    interpolation between nodes matches the simulation kernel exactly.
    """

    grid_lo: float
    grid_step: float
    logit: np.ndarray
    rho: np.ndarray
    sig: np.ndarray
    opp: Optional[np.ndarray] = None
    logit_cap: float = 50.0

    def __post_init__(self):
        self.logit = np.ascontiguousarray(self.logit, dtype=np.float64)
        self.rho = np.ascontiguousarray(self.rho, dtype=np.float64)
        self.sig = np.ascontiguousarray(np.broadcast_to(self.sig, (self.logit.shape[0],)), dtype=np.float64)
        if self.opp is not None:
            self.opp = np.ascontiguousarray(self.opp, dtype=np.float64)
        if self.rho.shape != self.logit.shape:
            raise ValueError("nuisance tables must share one grid")

    @property
    def n_rows(self):
        return self.logit.shape[0]

    @property
    def grid(self):
        return self.grid_lo + self.grid_step * np.arange(self.logit.shape[1])

    def _interp(self, tab, s, rows):
        g = self.grid
        return interp_rows(tab, g, s, rows)

    def gap(self, s, rows=None):
        return np.clip(self._interp(self.logit, s, rows), -self.logit_cap, self.logit_cap)

    def gamma(self, s, rows=None):
        return expit(self.gap(s, rows))

    def rho_at(self, s, rows=None):
        return self._interp(self.rho, s, rows)

    def opp_at(self, s, rows=None):
        return self._interp(self.opp, s, rows)

    def take(self, rows):
        rows = np.asarray(rows)
        return replace(self, logit=self.logit[rows], rho=self.rho[rows], sig=self.sig[rows],
                       opp=None if self.opp is None else self.opp[rows])

    def with_tables(self, **kw):
        return replace(self, **kw)

    @classmethod
    def concat(cls, parts):
        first = parts[0]
        return replace(first, logit=np.vstack([p.logit for p in parts]),
                       rho=np.vstack([p.rho for p in parts]),
                       sig=np.concatenate([p.sig for p in parts]),
                       opp=None if first.opp is None else np.vstack([p.opp for p in parts]))


def oracle_tables(model, table: OracleTable, x, logit_cap=50.0):
    """True nuisances (DP-oracle CCP, model transition) for the agents in ``x``."""
    x = np.atleast_2d(x)
    orc = table.oracle(x)
    grid = orc.s_grid
    n = x.shape[0]
    if model.kind == ENTRY:
        rho = np.zeros((n, grid.size))
        opp = np.repeat(model.opp_prob(x)[:, None], grid.size, axis=1)
    else:
        rho = model.rho(grid[None, :], (x @ np.asarray(model.b))[:, None])
        opp = None
    return NuisanceTables(float(grid[0]), float(grid[1] - grid[0]), orc.gap, rho,
                          model.noise_std, opp, logit_cap)


@dataclass
class ValueBasis:
    """Path-averaged basis; ``psi1`` has one column per cost parameter."""

    psi1: np.ndarray
    psi2: np.ndarray
    horizon: int
    n_paths: int
    seed_key: int
    paths: Optional[np.ndarray] = None

    def value(self, theta):
        return self.psi1 @ np.asarray(theta, dtype=float) + self.psi2


@dataclass(frozen=True)
class Request:
    """One rollout per start: ``first_action`` -1 follows the policy at t = 0."""

    policy: PolicySpec
    first_action: int = -1
    first_shift: float = 0.0
    score: bool = False
    keep_paths: bool = False


@dataclass
class RolloutResult:
    mean: np.ndarray                      # (n, k+1)
    score: Optional[np.ndarray] = None    # (n, k+1): mean of path * z / sigma
    paths: Optional[np.ndarray] = None    # (n, P, k+1)
    znoise: Optional[np.ndarray] = None   # (n, P)


class Simulator:
    """Runs batches of rollouts over start states sharing shock blocks."""

    def __init__(self, model, nuisance: NuisanceTables, sim: SimConfig, kernels=None):
        self.model = model
        self.nuis = nuisance
        self.sim = sim
        self.kernels = kernels or backend.kernels
        self.k = model.dim_theta
        self.horizon = sim.horizon(model.beta)

    def run(self, s0, rows, keys, requests: Sequence[Request]):
        s0 = np.ascontiguousarray(s0, dtype=np.float64)
        rows = np.ascontiguousarray(rows, dtype=np.int64)
        keys = np.ascontiguousarray(keys, dtype=np.int64)
        n = s0.shape[0]
        P, T = self.sim.n_paths, self.horizon + 1
        chunk = max(1, int(self.sim.chunk_bytes // (P * T * 8 * 5)))
        results = []
        for r in requests:
            res = RolloutResult(np.empty((n, self.k + 1)))
            if r.score:
                res.score = np.empty((n, self.k + 1))
            if r.keep_paths:
                res.paths = np.empty((n, P, self.k + 1))
                res.znoise = np.empty((n, P))
            results.append(res)
        m = self.model
        nu = self.nuis
        opp = nu.opp if nu.opp is not None else nu.rho
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            c = hi - lo
            draws = [np.empty((c, T, P)) for _ in range(5)]
            self.kernels.draw_block(self.sim.base_seed, keys[lo:hi], self.sim.antithetic, *draws)
            out = np.empty((c, P, self.k + 1))
            zn = np.empty((c, P))
            for r, res in zip(requests, results):
                self.kernels.rollout(
                    1 if m.kind == ENTRY else 0, s0[lo:hi], rows[lo:hi], r.first_action,
                    r.policy.is_coin, r.policy.dev0, nu.logit, nu.rho, nu.sig, opp,
                    nu.grid_lo, 1.0 / nu.grid_step, m.s_lo, m.s_hi, nu.logit_cap,
                    m.beta, self.horizon, m.delta0, r.first_shift, *draws, out, zn)
                res.mean[lo:hi] = out.mean(axis=1)
                if r.score:
                    w = zn / nu.sig[rows[lo:hi]][:, None]
                    res.score[lo:hi] = np.einsum("ipk,ip->ik", out, w) / P
                if r.keep_paths:
                    res.paths[lo:hi] = out
                    res.znoise[lo:hi] = zn
        return results


def _rows_keys(n, rows, keys):
    rows = np.arange(n) if rows is None else np.asarray(rows)
    keys = np.arange(n) if keys is None else np.asarray(keys)
    return rows, keys


def forward_value_basis(s0, policy, nuisance, model, sim, rows=None, keys=None, keep_paths=False):
    """Simulated value basis of ``policy`` from each start mileage in ``s0``.

    ``rows`` selects the nuisance row (agent) of each start and ``keys`` its
    random-number stream; both default to ``arange(len(s0))``.
    """
    s0 = np.atleast_1d(np.asarray(s0, dtype=float))
    rows, keys = _rows_keys(s0.size, rows, keys)
    res = Simulator(model, nuisance, sim).run(s0, rows, keys, [Request(policy, keep_paths=keep_paths)])[0]
    k = model.dim_theta
    return ValueBasis(res.mean[:, :k], res.mean[:, k], sim.horizon(model.beta), sim.n_paths,
                      sim.base_seed, res.paths)


def continuation_value(s0, a, policy, nuisance, model, sim, rows=None, keys=None, keep_paths=False):
    """Basis of E[V(w_next; policy) | w, a]: next state drawn from the nuisance transition."""
    s0 = np.atleast_1d(np.asarray(s0, dtype=float))
    rows, keys = _rows_keys(s0.size, rows, keys)
    res = Simulator(model, nuisance, sim).run(
        s0, rows, keys, [Request(policy, first_action=int(a), keep_paths=keep_paths)])[0]
    k = model.dim_theta
    return ValueBasis(res.mean[:, :k], res.mean[:, k], sim.horizon(model.beta), sim.n_paths,
                      sim.base_seed, res.paths)


def direct_value(s0, theta, policy, nuisance, model, sim, rows=None, keys=None):
    """Value accumulated with theta-valued utilities along the same paths.

    Independent scalar re-implementation of the rollout, used to check the
    basis decomposition; slow, intended for a handful of start states.
    """
    from . import rng as _rng
    s0 = np.atleast_1d(np.asarray(s0, dtype=float))
    rows, keys = _rows_keys(s0.size, rows, keys)
    theta = np.asarray(theta, dtype=float)
    H = sim.horizon(model.beta)
    nu = nuisance
    grid = nu.grid
    out = np.zeros(s0.size)
    for i in range(s0.size):
        r = rows[i]
        tot = 0.0
        for p in range(sim.n_paths):
            pair = p // 2 if sim.antithetic else p
            key = _rng.stream_key(sim.base_seed, keys[i], pair)
            s = s0[i]
            val = 0.0
            for t in range(H):
                c = t * _rng.SLOTS_PER_STEP
                e0 = float(_rng.gumbel(key, c + _rng.SLOT_EPS0))
                e1 = float(_rng.gumbel(key, c + _rng.SLOT_EPS1))
                if policy.is_coin:
                    a = int(_rng.uniform(key, c + _rng.SLOT_COIN) < 0.5)
                else:
                    g = float(np.clip(interp_rows(nu.logit[r:r + 1], grid, [s])[0], -nu.logit_cap, nu.logit_cap))
                    a = int(e1 - e0 >= policy.dev0 - g)
                u = -theta[0] if a == 0 else -theta[1] * s
                u += e1 if a else e0
                if model.kind == ENTRY:
                    ap = float(_rng.uniform(key, c + _rng.SLOT_OPP)) < interp_rows(nu.opp[r:r + 1], grid, [s])[0]
                    if ap:
                        u += model.delta0 + (theta[2] if a else 0.0)
                    s = min(s + 1.0, model.s_hi) if a else 1.0
                else:
                    if a:
                        z = float(_rng.normal(key, c + _rng.SLOT_N1, c + _rng.SLOT_N2))
                        if t == 0 and sim.antithetic and p % 2:
                            z = -z
                        rho = interp_rows(nu.rho[r:r + 1], grid, [s])[0]
                        s = min(max(rho + nu.sig[r] * z, model.s_lo), model.s_hi)
                    else:
                        s = 1.0
                val += model.beta ** t * u
            tot += val
        out[i] = tot / sim.n_paths
    return out


def dump_bases(path, basis: ValueBasis):
    """CSV ``w_index,psi1_R,psi1_mu[,psi1_delta],psi2`` for debugging."""
    k = basis.psi1.shape[1]
    names = ["psi1_R", "psi1_mu", "psi1_delta"][:k]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["w_index"] + names + ["psi2"]) + "\n")
        for i in range(basis.psi1.shape[0]):
            vals = [repr(float(v)) for v in basis.psi1[i]] + [repr(float(basis.psi2[i]))]
            fh.write(",".join([str(i)] + vals) + "\n")
