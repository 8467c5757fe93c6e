"""Cross-fitting plans and l1-regularized first stages.

The CCP is fit by l1-penalized logistic regression (proximal gradient with
FISTA momentum); the transition mean by the lasso (coordinate descent) on the
a = 1 observations.  Features are standardized inside the fitters and
coefficients reported on the original scale.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, logit

from .dgp import ENTRY
from .valuesim import NuisanceTables


@dataclass(frozen=True)
class CrossFitPlan:
    n_folds: int
    fold_assignment: np.ndarray
    seed: int

    def test_idx(self, k):
        return np.flatnonzero(self.fold_assignment == k)

    def train_idx(self, k):
        return np.flatnonzero(self.fold_assignment != k)


def make_crossfit_plan(N, K=2, seed=0):
    """Uniform random partition of ``range(N)`` into K folds of near-equal size."""
    if K < 2 or K > N:
        raise ValueError("need 2 <= K <= N")
    perm = np.random.default_rng(seed).permutation(N)
    fold = np.empty(N, dtype=np.int64)
    fold[perm] = np.arange(N) % K
    return CrossFitPlan(K, fold, seed)


FEATURE_SETS = ("linear", "quadratic")


def design(s, x, features="linear"):
    """Regressors built from the state; ``linear`` is (s, x).

    ``quadratic`` appends s^2 and s*x to let the logit bend in mileage.
    """
    s = np.asarray(s, dtype=float)[:, None]
    x = np.atleast_2d(x)
    if features == "linear":
        return np.hstack([s, x])
    if features == "quadratic":
        return np.hstack([s, x, s ** 2, s * x])
    raise ValueError(f"unknown feature set {features!r}")


def _standardize(X):
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (X - mean) / sd, mean, sd


def plugin_lambda(n, d_w, c):
    return c * math.sqrt(math.log(d_w) / n)


@dataclass
class CcpModel:
    intercept: float
    coef: np.ndarray
    lam: float
    eps_clip: float = 0.01
    features: str = "linear"
    degenerate: bool = False
    n_iter: int = 0
    converged: bool = True

    def index(self, s, x):
        return self.intercept + design(s, x, self.features) @ self.coef

    def to_dict(self):
        d = asdict(self)
        d["coef"] = self.coef.tolist()
        return d


@dataclass
class TransitionModel:
    intercept: float
    coef: np.ndarray
    lam: float
    sigma: float
    features: str = "linear"
    n_iter: int = 0
    converged: bool = True

    def to_dict(self):
        d = asdict(self)
        d["coef"] = self.coef.tolist()
        return d


def fit_ccp(s, x, a, lam=None, eps_clip=0.01, features="linear", tol=1e-7, max_iter=10_000,
            post=False):
    """l1-logistic CCP; ``lam=None`` uses the plug-in 0.5 sqrt(log(d_w)/n).

    ``post`` refits an unpenalized logit on the selected columns.
    """
    X = design(s, x, features)
    y = np.asarray(a, dtype=float)
    n, p = X.shape
    if n == 0:
        raise ValueError("empty training set")
    if lam is None:
        lam = plugin_lambda(n, x.shape[1] + 1, 0.5)
    ybar = y.mean()
    if ybar in (0.0, 1.0):
        b0 = float(logit(np.clip(ybar, eps_clip, 1 - eps_clip)))
        return CcpModel(b0, np.zeros(p), lam, eps_clip, features, degenerate=True)
    Z, mean, sd = _standardize(X)
    Z1 = np.hstack([np.ones((n, 1)), Z])
    L = 0.25 * np.linalg.eigvalsh(Z1.T @ Z1 / n)[-1]
    step = 1.0 / L
    thr = np.r_[0.0, np.full(p, lam * step)]
    beta = np.zeros(p + 1)
    beta[0] = logit(ybar)
    yk, tk = beta.copy(), 1.0
    converged = False
    for it in range(1, max_iter + 1):
        grad = Z1.T @ (expit(Z1 @ yk) - y) / n
        v = yk - step * grad
        new = np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)
        change = np.max(np.abs(new - beta))
        tn = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        mom = (tk - 1.0) / tn
        # restart momentum when it points uphill
        if np.dot(new - beta, yk - new) > 0:
            tn, mom = 1.0, 0.0
        yk = new + mom * (new - beta)
        beta, tk = new, tn
        if change < tol:
            converged = True
            break
    if post:
        beta = _refit_logit(Z1, y, beta, tol, max_iter)
    coef = beta[1:] / sd
    b0 = beta[0] - np.dot(coef, mean)
    return CcpModel(float(b0), coef, lam, eps_clip, features, False, it, converged)


def _refit_logit(Z1, y, beta, tol, max_iter):
    """Unpenalized Newton steps on the support of ``beta`` (intercept always kept)."""
    keep = np.flatnonzero(beta != 0.0)
    keep = np.union1d(keep, [0])
    Zs = Z1[:, keep]
    b = beta[keep].copy()
    for _ in range(min(max_iter, 50)):
        p = expit(Zs @ b)
        H = Zs.T @ (Zs * (p * (1.0 - p))[:, None]) + 1e-8 * np.eye(keep.size)
        step = np.linalg.solve(H, Zs.T @ (y - p))
        b += step
        if np.max(np.abs(step)) < tol:
            break
    out = np.zeros_like(beta)
    out[keep] = b
    return out


def predict_ccp(model: CcpModel, s, x):
    idx = model.index(s, x)
    return np.clip(expit(idx), model.eps_clip, 1.0 - model.eps_clip)


def _lasso_cd(Z, y, lam, tol, max_iter):
    """Coordinate descent for (1/2n)||y - Z b||^2 + lam ||b||_1 on centred data."""
    n, p = Z.shape
    G = Z.T @ Z / n
    c = Z.T @ y / n
    b = np.zeros(p)
    diag = np.diag(G).copy()
    for it in range(1, max_iter + 1):
        big = 0.0
        for j in range(p):
            if diag[j] == 0.0:
                continue
            rho = c[j] - G[j] @ b + diag[j] * b[j]
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / diag[j]
            big = max(big, abs(new - b[j]))
            b[j] = new
        if big < tol:
            return b, it, True
    return b, max_iter, False


def fit_transition(s, x, s_next, lam=None, features="linear", tol=1e-10, max_iter=10_000,
                   refits=3, min_obs=10, post=False):
    """Lasso for the transition mean on a = 1 observations.

    With ``lam=None`` the plug-in 1.1 sigma sqrt(log(d_w)/n) is used; sigma
    starts at the response standard deviation and is refreshed from the
    residuals ``refits`` times.
    """
    X = design(s, x, features)
    y = np.asarray(s_next, dtype=float)
    n, p = X.shape
    if n < min_obs:
        raise ValueError(f"need at least {min_obs} maintenance observations, got {n}")
    Z, mean, sd = _standardize(X)
    ym = y.mean()
    yc = y - ym
    auto = lam is None
    sigma = float(np.std(y))
    rounds = refits if auto else 1
    for _ in range(rounds):
        lam_k = plugin_lambda(n, x.shape[1] + 1, 1.1 * sigma) if auto else lam
        b, it, conv = _lasso_cd(Z, yc, lam_k, tol, max_iter)
        if post:
            sel = np.flatnonzero(b)
            b = np.zeros_like(b)
            if sel.size:
                b[sel] = np.linalg.lstsq(Z[:, sel], yc, rcond=None)[0]
        resid = yc - Z @ b
        sigma = float(np.std(resid))
    coef = b / sd
    b0 = ym - np.dot(coef, mean)
    return TransitionModel(float(b0), coef, float(lam_k), max(sigma, 1e-12), features, it, conv)


def predict_transition(model: TransitionModel, s, x):
    return model.intercept + design(s, x, model.features) @ model.coef


@dataclass
class NuisanceEstimate:
    """Per-fold first-stage fits; fold k is trained on the complement of fold k."""

    plan: CrossFitPlan
    ccp: list
    trans: list
    opp: list = field(default_factory=list)

    def to_json(self, path):
        out = {"n_folds": self.plan.n_folds, "seed": self.plan.seed,
               "fold_assignment": self.plan.fold_assignment.tolist(),
               "ccp": [m.to_dict() for m in self.ccp],
               "transition": [m.to_dict() if m is not None else None for m in self.trans],
               "opponent": [m.to_dict() for m in self.opp]}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(out, fh, indent=2)


def fit_nuisances(panel, plan, lam_ccp=None, lam_trans=None, eps_clip=0.01, features="linear",
                  post=False):
    ccp, trans, opp = [], [], []
    for k in range(plan.n_folds):
        tr = plan.train_idx(k)
        ccp.append(fit_ccp(panel.s[tr], panel.x[tr], panel.a[tr], lam_ccp, eps_clip, features,
                           post=post))
        if panel.model.kind == ENTRY:
            trans.append(None)
            opp.append(fit_ccp(panel.s[tr], panel.x[tr], panel.a_p[tr], lam_ccp, eps_clip, features,
                               post=post))
        else:
            keep = tr[panel.a[tr] == 1]
            trans.append(fit_transition(panel.s[keep], panel.x[keep], panel.s_next[keep],
                                        lam_trans, features, post=post))
    return NuisanceEstimate(plan, ccp, trans, opp)


def _linear_in_s(model):
    return model.features == "linear"


def nuisance_tables(panel, est: NuisanceEstimate, grid_size=None):
    """Out-of-fold nuisance tables, one row per observation of ``panel``.

    Row i is built from the models of the fold holding i.  Linear features
    need only two grid nodes (exact); otherwise ``grid_size`` nodes are used.
    """
    m = panel.model
    n = len(panel)
    if m.kind == ENTRY:
        grid = np.arange(m.s_lo, m.s_hi + 1.0)
    else:
        linear = _linear_in_s(est.ccp[0])
        g = 2 if linear and grid_size is None else (grid_size or 121)
        grid = np.linspace(m.s_lo, m.s_hi, g)
    G = grid.size
    lg = np.empty((n, G))
    rho = np.zeros((n, G))
    sig = np.ones(n) * m.noise_std
    opp = np.empty((n, G)) if m.kind == ENTRY else None
    cap = None
    for k in range(est.plan.n_folds):
        idx = est.plan.test_idx(k)
        if idx.size == 0:
            continue
        ss = np.repeat(grid[None, :], idx.size, axis=0).ravel()
        xx = np.repeat(panel.x[idx], G, axis=0)
        cm = est.ccp[k]
        lg[idx] = cm.index(ss, xx).reshape(idx.size, G)
        cap = float(logit(1.0 - cm.eps_clip))
        if m.kind == ENTRY:
            opp[idx] = predict_ccp(est.opp[k], ss, xx).reshape(idx.size, G)
        else:
            tm = est.trans[k]
            rho[idx] = predict_transition(tm, ss, xx).reshape(idx.size, G)
            sig[idx] = tm.sigma
    return NuisanceTables(float(grid[0]), float(grid[1] - grid[0]), lg, rho, sig, opp, cap)
