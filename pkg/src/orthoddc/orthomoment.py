"""Naive and Neyman-orthogonal moment inequalities.

For deviation policies sigma_l the naive moment is
``m_l = V(w; theta; sigma_l) - V(w; theta; sigma*)`` with simulated values.
The orthogonal moment adds a correction ``alpha_l`` with zero mean at the true
nuisances that cancels the first-order effect of CCP, transition and
opponent-CCP errors.

Every per-observation quantity is affine in theta.  It is stored as an array
whose last axis holds ``(coefficients on theta..., constant)``, so one
simulation pass serves every grid point.

Two correction forms are available:

``exact``
    Each policy's value is corrected with its discounted-occupancy weight
    ``omega = d nu_sigma / d mu`` (``1/(1-beta)`` for the observed policy).
    The CCP multiplier is ``G = [u1 - u0 + beta (C1 - C0) - logit p] dp/dgamma``,
    where ``p`` is the policy's own choice probability.  The transition
    multiplier is ``beta p Pi / gamma`` on maintenance observations.
``closed``
    Closed forms built around the observed policy.  Gamma carries the
    ``-2/gamma`` term, only the observed policy gets a CCP correction, and
    every transition term uses the ``1/(1-beta)`` weight.  Kept for
    comparison in the orthogonality audit, which it fails.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logit

from .dgp import ENTRY, clipped_mean, clipped_slope
from .occupancy import occupancy_ratios
from .valuesim import (OPTIMAL_POLICY, NuisanceTables, Request, Simulator, default_deviations,
                       expected_selected_shock_derivative)


@dataclass(frozen=True)
class MomentConfig:
    policies: tuple = field(default_factory=default_deviations)
    ccp: bool = True
    transition: bool = True
    opponent: bool = True
    form: str = "exact"
    ccp_sign: float = 1.0
    trans_sign: float = 1.0
    trans_form: str = "weighted"
    pi_method: str = "score"
    h_fd: float = 0.05
    occupancy_nodes: int = 61

    def __post_init__(self):
        if len(self.policies) < 1:
            raise ValueError("need at least one deviation policy")
        if self.form not in ("exact", "closed"):
            raise ValueError("form must be 'exact' or 'closed'")
        if self.trans_form not in ("weighted", "unweighted"):
            raise ValueError("trans_form must be 'weighted' or 'unweighted'")
        if self.pi_method not in ("score", "fd"):
            raise ValueError("pi_method must be 'score' or 'fd'")
        if self.pi_method == "fd" and self.h_fd < 1e-3:
            raise ValueError("h_fd below 1e-3 is dominated by simulation noise")

    @property
    def any_correction(self):
        return self.ccp or self.transition or self.opponent

    def naive(self):
        from dataclasses import replace
        return replace(self, ccp=False, transition=False, opponent=False)

    def flipped(self):
        from dataclasses import replace
        return replace(self, ccp_sign=-self.ccp_sign, trans_sign=-self.trans_sign)


def affine_eval(aff, thetas):
    """Evaluate affine arrays (..., k+1) at thetas (T, k) -> (T, ...)."""
    thetas = np.atleast_2d(thetas)
    k = thetas.shape[1]
    return np.einsum("tk,...k->t...", thetas, aff[..., :k]) + aff[..., k]


@dataclass
class MomentEvaluation:
    """Per-observation affine moments: ``m`` and correction parts, each (N, L, k+1)."""

    m: np.ndarray
    parts: dict
    labels: tuple

    @property
    def alpha(self):
        out = np.zeros_like(self.m)
        for v in self.parts.values():
            out = out + v
        return out

    @property
    def g(self):
        return self.m + self.alpha

    def mean_affine(self, which="g", idx=None):
        arr = getattr(self, which) if isinstance(which, str) else which
        if idx is not None:
            arr = arr[idx]
        return arr.mean(axis=0)

    def values(self, theta, which="g"):
        arr = getattr(self, which)
        return affine_eval(arr, np.atleast_2d(theta))

    def sample_mean(self, thetas, which="g", idx=None):
        """(T, L) sample means at each theta."""
        return affine_eval(self.mean_affine(which, idx), thetas)

    def sample_sd(self, thetas, which="g", idx=None):
        """(T, L) standard deviations across observations at each theta."""
        arr = getattr(self, which)
        if idx is not None:
            arr = arr[idx]
        c = arr - arr.mean(axis=0)
        cov = np.einsum("nlj,nlk->ljk", c, c) / max(arr.shape[0] - 1, 1)
        th = np.atleast_2d(thetas)
        t1 = np.hstack([th, np.ones((th.shape[0], 1))])
        var = np.einsum("tj,ljk,tk->tl", t1, cov, t1)
        return np.sqrt(np.maximum(var, 0.0))

    def dump(self, path, thetas):
        thetas = np.atleast_2d(thetas)
        m = self.values(thetas, "m")
        al = self.values(thetas, "alpha")
        with open(path, "w", encoding="utf-8") as fh:
            cols = ["obs", "theta_R", "theta_mu"] + (["theta_delta"] if thetas.shape[1] == 3 else [])
            fh.write(",".join(cols + ["l", "m", "alpha", "g"]) + "\n")
            for t, th in enumerate(thetas):
                for i in range(m.shape[1]):
                    for l in range(m.shape[2]):
                        vals = [repr(float(v)) for v in th]
                        fh.write(",".join([str(i)] + vals + [str(l), repr(float(m[t, i, l])),
                                 repr(float(al[t, i, l])), repr(float(m[t, i, l] + al[t, i, l]))]) + "\n")


def _observation_inputs(panel, nuis, rows):
    s = panel.s
    gam = nuis.gamma(s, rows)
    out = {"s": s, "gamma": gam, "a": panel.a.astype(float)}
    if panel.model.kind == ENTRY:
        out["opp"] = nuis.opp_at(s, rows)
        out["a_p"] = panel.a_p.astype(float)
    else:
        out["rho"] = nuis.rho_at(s, rows)
        out["sig"] = nuis.sig[rows]
        out["s_next"] = panel.s_next
    return out


def utility_gap(model, obs):
    """Affine expected flow utility of keeping minus replacing, (N, k+1)."""
    s = obs["s"]
    n = s.size
    k = model.dim_theta
    u = np.zeros((n, k + 1))
    u[:, 0] = 1.0
    u[:, 1] = -s
    if model.kind == ENTRY:
        u[:, 2] = obs["opp"]
    return u


def gamma_big(model, obs, c1, c0):
    """Closed-form Gamma: u1 - u0 + beta (C1 - C0) - 2/gamma - logit gamma (affine)."""
    g = utility_gap(model, obs) + model.beta * (c1 - c0)
    g[:, -1] += expected_selected_shock_derivative(obs["gamma"])
    return g


def alpha_ccp(model, obs, gamma_aff, sign=1.0):
    """sign * (1/(1-beta)) Gamma (1{a=1} - gamma); the moment subtracts it."""
    return sign / (1.0 - model.beta) * gamma_aff * (obs["a"] - obs["gamma"])[:, None]


def alpha_trans(model, obs, pi_aff, p_sigma, form="weighted"):
    """(beta/(1-beta)) Pi [gamma^sigma] 1{a=1} (s_next - rho); zero when a = 0."""
    resid = obs["a"] * (obs["s_next"] - obs["rho"])
    w = p_sigma if form == "weighted" else 1.0
    return model.beta / (1.0 - model.beta) * pi_aff * (w * resid)[:, None]


def alpha_entry_game(model, obs, p_sigma):
    """Opponent term (1/(1-beta)) (delta1 - delta0) (gamma^sigma - gamma_A)(1{a_p=1} - gamma_p)."""
    n = obs["s"].size
    out = np.zeros((n, model.dim_theta + 1))
    out[:, 2] = (p_sigma - obs["gamma"]) * (obs["a_p"] - obs["opp"]) / (1.0 - model.beta)
    return out


def _requests(model, cfg, policy, is_star):
    reqs = {"V": Request(policy)}
    if not cfg.any_correction:
        return reqs
    bus = model.kind != ENTRY
    need_c = cfg.ccp and (cfg.form == "exact" and not policy.is_coin or is_star)
    need_c1 = need_c or (bus and cfg.transition)
    if need_c1:
        reqs["C1"] = Request(policy, first_action=1, score=bus and cfg.pi_method == "score")
    if need_c:
        reqs["C0"] = Request(policy, first_action=0)
    if bus and cfg.transition and cfg.pi_method == "fd":
        reqs["C1+"] = Request(policy, first_action=1, first_shift=cfg.h_fd)
        reqs["C1-"] = Request(policy, first_action=1, first_shift=-cfg.h_fd)
    return reqs


def build_moments(panel, nuis: NuisanceTables, sim, cfg: MomentConfig, rows=None, keys=None,
                  omega=None):
    """Simulate every policy from every observed state and assemble the moments.

    ``rows`` maps observations to nuisance rows (default: identity) and
    ``keys`` to random-number streams (default: observation index).
    """
    model = panel.model
    n = len(panel)
    rows = np.arange(n) if rows is None else np.asarray(rows)
    keys = np.arange(n) if keys is None else np.asarray(keys)
    pols = (OPTIMAL_POLICY,) + tuple(cfg.policies)
    plan = []
    for j, pol in enumerate(pols):
        for name, req in _requests(model, cfg, pol, j == 0).items():
            plan.append((j, name, req))
    res = Simulator(model, nuis, sim).run(panel.s, rows, keys, [r for _, _, r in plan])
    out = {}
    for (j, name, req), rr in zip(plan, res):
        out[(j, name)] = rr.mean
        if req.score:
            out[(j, "Pi")] = rr.score
    if cfg.pi_method == "fd":
        for j in range(len(pols)):
            if (j, "C1+") in out:
                out[(j, "Pi")] = (out[(j, "C1+")] - out[(j, "C1-")]) / (2.0 * cfg.h_fd)
    L = len(cfg.policies)
    k = model.dim_theta
    m = np.stack([out[(l + 1, "V")] - out[(0, "V")] for l in range(L)], axis=1)
    parts = {}
    if cfg.any_correction:
        obs = _observation_inputs(panel, nuis, rows)
        if cfg.form == "exact":
            if omega is None:
                omega = occupancy_ratios(model, nuis, rows, panel.s, cfg.policies, cfg.occupancy_nodes)
            parts = _exact_parts(model, cfg, obs, out, pols, omega)
        else:
            parts = _closed_form_parts(model, cfg, obs, out, pols)
    labels = tuple(p.label for p in cfg.policies)
    return MomentEvaluation(m, parts, labels)


def _exact_parts(model, cfg, obs, sims, pols, omega):
    beta = model.beta
    gam = obs["gamma"]
    n = gam.size
    L = len(pols) - 1
    k = model.dim_theta
    u = utility_gap(model, obs)
    per = {"ccp": [], "trans": [], "opp": []}
    if cfg.transition and model.kind != ENTRY:
        # s' is a clipped Gaussian: centre at its clipped mean and rescale so
        # that the residual moves one for one with the latent mean
        lo, hi = model.s_lo, model.s_hi
        rho, sig = obs["rho"], obs["sig"]
        slope = np.maximum(clipped_slope(rho, sig, lo, hi), 1e-3)
        trans_resid = (obs["s_next"] - clipped_mean(rho, sig, lo, hi)) / (slope * gam)
    for j, pol in enumerate(pols):
        w = 1.0 / (1.0 - beta) if j == 0 else omega[:, j - 1]
        w = np.broadcast_to(w, (n,))
        p = pol.choice_prob(gam)
        zero = np.zeros((n, k + 1))
        if cfg.ccp and not pol.is_coin:
            G = u + beta * (sims[(j, "C1")] - sims[(j, "C0")])
            G[:, -1] -= logit(p)
            G = G * pol.dprob_dgamma(gam)[:, None]
            per["ccp"].append(cfg.ccp_sign * w[:, None] * G * (obs["a"] - gam)[:, None])
        else:
            per["ccp"].append(zero)
        if cfg.transition and model.kind != ENTRY:
            resid = obs["a"] * trans_resid
            per["trans"].append(cfg.trans_sign * (w * beta * p * resid)[:, None] * sims[(j, "Pi")])
        else:
            per["trans"].append(zero)
        if cfg.opponent and model.kind == ENTRY:
            v = np.zeros((n, k + 1))
            v[:, 2] = p
            v[:, -1] = model.delta0
            per["opp"].append(cfg.ccp_sign * w[:, None] * v * (obs["a_p"] - obs["opp"])[:, None])
        else:
            per["opp"].append(zero)
    parts = {}
    for name, lst in per.items():
        parts[name] = np.stack([lst[l + 1] - lst[0] for l in range(L)], axis=1)
    return parts


def _closed_form_parts(model, cfg, obs, sims, pols):
    n = obs["s"].size
    L = len(pols) - 1
    k = model.dim_theta
    parts = {}
    if cfg.ccp:
        gb = gamma_big(model, obs, sims[(0, "C1")], sims[(0, "C0")])
        a = alpha_ccp(model, obs, gb, cfg.ccp_sign)
        parts["ccp"] = np.repeat(-a[:, None, :], L, axis=1)
    if cfg.transition and model.kind != ENTRY:
        tr = [cfg.trans_sign * alpha_trans(model, obs, sims[(j, "Pi")], pol.choice_prob(obs["gamma"]),
                                           cfg.trans_form) for j, pol in enumerate(pols)]
        parts["trans"] = np.stack([tr[l + 1] - tr[0] for l in range(L)], axis=1)
    if cfg.opponent and model.kind == ENTRY:
        parts["opp"] = np.stack([cfg.ccp_sign * alpha_entry_game(model, obs, pol.choice_prob(obs["gamma"]))
                                 for pol in pols[1:]], axis=1)
    return parts


def moment_naive(panel, nuis, sim, cfg, **kw):
    return build_moments(panel, nuis, sim, cfg.naive(), **kw)


def moment_orthogonal(panel, nuis, sim, cfg, **kw):
    return build_moments(panel, nuis, sim, cfg, **kw)


# ---------------------------------------------------------------------------
# numerical Gateaux derivative

def ccp_direction(s):
    return 0.2 * np.sin(s)


def transition_direction(s):
    return 0.2 * np.cos(s)


def _admissible(base, step, room=0.25):
    """Zero the direction where base +/- step would cover more than ``room`` of
    the distance to the nearest end of (0, 1); keeps logit(base + r step) smooth."""
    return np.where(np.abs(step) <= room * np.minimum(base, 1.0 - base), step, 0.0)


def perturb(nuis: NuisanceTables, family, r, delta=None, r_max=0.1, room=0.25):
    """Nuisance tables on the path xi_0 + r * delta for one nuisance family.

    Probability directions are switched off at table nodes where a step of
    size ``r_max`` would cover a quarter of the distance to 0 or 1, so the
    direction itself does not depend on r.
    """
    grid = nuis.grid
    if family == "ccp":
        delta = delta or ccp_direction
        g0 = 1.0 / (1.0 + np.exp(-nuis.logit))
        d = _admissible(g0, r_max * np.broadcast_to(delta(grid), g0.shape), room) / r_max
        return nuis.with_tables(logit=logit(g0 + r * d))
    if family == "transition":
        delta = delta or transition_direction
        return nuis.with_tables(rho=nuis.rho + r * delta(grid)[None, :])
    if family == "opponent":
        delta = delta or ccp_direction
        d = _admissible(nuis.opp, r_max * np.broadcast_to(delta(grid), nuis.opp.shape), room) / r_max
        return nuis.with_tables(opp=nuis.opp + r * d)
    raise ValueError(f"unknown nuisance family {family!r}")


@dataclass
class OrthogonalityResult:
    thetas: np.ndarray
    r_grid: np.ndarray
    family: str
    slope: dict          # name -> (T, L) mean slope at r = 0
    se: dict             # name -> (T, L) standard error over observations
    curves: dict         # name -> (R, T, L) sample means along the path

    def passes(self, ratio=0.1, n_se=3.0, name="orthogonal"):
        """Per (theta, l): |slope| < n_se SE, and the slope vector is < ratio x naive."""
        s, se = self.slope[name], self.se[name]
        small = np.abs(s) < n_se * se
        shrink = np.linalg.norm(s) < ratio * np.linalg.norm(self.slope["naive"])
        return bool(np.all(small) and shrink)


def orthogonality_check(panel, thetas, nuis0, family, sim, cfg, r_grid=None, delta=None, room=0.25):
    """Slopes at r = 0 of E_N m and E_N g along xi_0 + r * delta.

    A quadratic in r is fitted to each observation's moment path; the mean of
    the per-observation linear coefficients is the slope and their spread
    gives its standard error.  ``flipped`` negates every correction.
    """
    r_grid = np.linspace(-0.1, 0.1, 11) if r_grid is None else np.asarray(r_grid, dtype=float)
    if not np.allclose(np.sort(r_grid), -np.sort(r_grid)[::-1]):
        raise ValueError("r_grid must be symmetric around 0")
    r_max = float(np.max(np.abs(r_grid)))
    thetas = np.atleast_2d(thetas)
    vals = {"naive": [], "orthogonal": [], "flipped": []}
    for r in r_grid:
        ev = build_moments(panel, perturb(nuis0, family, r, delta, r_max, room), sim, cfg)
        m = ev.values(thetas, "m")
        al = ev.values(thetas, "alpha")
        vals["naive"].append(m)
        vals["orthogonal"].append(m + al)
        vals["flipped"].append(m - al)
    X = np.column_stack([np.ones_like(r_grid), r_grid, r_grid ** 2])
    coef = np.linalg.pinv(X)[1]
    slope, se, curves = {}, {}, {}
    for name, lst in vals.items():
        arr = np.stack(lst)                      # (R, T, N, L)
        per_obs = np.einsum("r,rtnl->tnl", coef, arr)
        n = per_obs.shape[1]
        slope[name] = per_obs.mean(axis=1)
        se[name] = per_obs.std(axis=1, ddof=1) / np.sqrt(n)
        curves[name] = arr.mean(axis=2)
    return OrthogonalityResult(thetas, r_grid, family, slope, se, curves)
