"""Criterion surfaces, contour-set estimates and subsampling confidence regions.

All statistics work on per-observation affine moments ``(N, L, k + 1)``
(coefficients on theta, then the constant), so evaluating a grid of theta
values or a subsample of observations is a cheap linear map.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .orthomoment import affine_eval

LOGN, DEGENERACY, FIXED = "logn", "degeneracy", "fixed"
RULES = (LOGN, DEGENERACY, FIXED)


@dataclass(frozen=True)
class ThetaGrid:
    lo: tuple
    hi: tuple
    n: tuple
    names: tuple = ("R", "mu")

    def __post_init__(self):
        if not (len(self.lo) == len(self.hi) == len(self.n) == len(self.names)):
            raise ValueError("grid axes disagree in length")
        if any(k < 1 for k in self.n) or any(h < l for l, h in zip(self.lo, self.hi)):
            raise ValueError("bad grid axes")

    @classmethod
    def default(cls, dim=2):
        if dim == 2:
            return cls((0.0, 0.0), (10.0, 3.0), (41, 31))
        return cls((0.0, 0.0, -2.0), (10.0, 3.0, 2.0), (21, 16, 9), ("R", "mu", "delta"))

    @property
    def axes(self):
        return [np.linspace(l, h, k) for l, h, k in zip(self.lo, self.hi, self.n)]

    @property
    def step(self):
        return np.array([(h - l) / (k - 1) if k > 1 else 0.0
                         for l, h, k in zip(self.lo, self.hi, self.n)])

    @property
    def points(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])

    def __len__(self):
        return int(np.prod(self.n))

    def index_of(self, theta, atol=1e-9):
        d = np.abs(self.points - np.asarray(theta, dtype=float)).max(axis=1)
        i = int(np.argmin(d))
        if d[i] > atol:
            raise KeyError(f"{theta} is not a grid point")
        return i

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi), "n": list(self.n), "names": list(self.names)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["lo"]), tuple(d["hi"]), tuple(d["n"]), tuple(d.get("names", ("R", "mu"))))


def positive_part_sq(means, weights=None):
    """||max(means, 0) * w||^2 along the last axis."""
    means = np.asarray(means, dtype=float)
    w = 1.0 if weights is None else weights
    return np.sum((np.maximum(means, 0.0) * w) ** 2, axis=-1)


def moment_weights(aff, points, rule="identity"):
    """Diagonal weights per grid point: ones, or inverse per-coordinate SDs."""
    n_pts, L = len(points), aff.shape[1]
    if rule == "identity":
        return np.ones((n_pts, L))
    if rule != "inverse_sd":
        raise ValueError(f"unknown weighting rule {rule!r}")
    c = aff - aff.mean(axis=0)
    cov = np.einsum("nlj,nlk->ljk", c, c) / max(aff.shape[0] - 1, 1)
    t1 = np.hstack([points, np.ones((n_pts, 1))])
    var = np.einsum("tj,ljk,tk->tl", t1, cov, t1)
    sd = np.sqrt(np.maximum(var, 0.0))
    floor = 1e-8 * max(float(sd.max()), 1.0)
    return 1.0 / np.maximum(sd, floor)


@dataclass
class CriterionSurface:
    grid: ThetaGrid
    means: np.ndarray      # (n_pts, L)
    weights: np.ndarray    # (n_pts, L)
    N: int
    w_rule: str = "identity"

    @property
    def Q(self):
        return positive_part_sq(self.means, self.weights)

    @property
    def NQ(self):
        return self.N * self.Q

    def argmin(self):
        return int(np.argmin(self.Q))

    def to_csv(self, path, members=None):
        pts, q = self.grid.points, self.Q
        members = np.zeros(len(pts), bool) if members is None else members
        cols = [f"theta_{n}" for n in self.grid.names]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols + ["QN", "in_set"]) + "\n")
            for p, qi, m in zip(pts, q, members):
                fh.write(",".join([repr(float(v)) for v in p] + [repr(float(qi)), str(int(m))]) + "\n")


def surface_from_affine(aff, grid: ThetaGrid, w_rule="identity", weights=None):
    """Criterion surface from per-observation affine moments ``(N, L, k + 1)``."""
    if len(grid) == 0:
        raise ValueError("empty grid")
    pts = grid.points
    means = affine_eval(aff.mean(axis=0), pts)
    if weights is None:
        weights = moment_weights(aff, pts, w_rule)
    return CriterionSurface(grid, means, weights, aff.shape[0], w_rule)


def criterion_surface(panel, grid, nuis, sim, cfg, w_rule="identity", which="g"):
    """Simulate the moments once and assemble Q_N on every grid point."""
    from .orthomoment import build_moments
    ev = build_moments(panel, nuis, sim, cfg)
    return surface_from_affine(getattr(ev, which), grid, w_rule), ev


def choose_contour_level(surface: CriterionSurface, rule=LOGN, N=None, kappa=1.0, c_fixed=None):
    N = surface.N if N is None else N
    if rule == LOGN:
        return kappa * math.log(N)
    if rule == DEGENERACY:
        return N * max(float(surface.Q.min()), math.log(N) / math.sqrt(N))
    if rule == FIXED:
        if c_fixed is None or c_fixed < 0:
            raise ValueError("fixed rule needs c_fixed >= 0")
        return float(c_fixed)
    raise ValueError(f"unknown contour rule {rule!r}")


@dataclass
class SetEstimate:
    c: float
    members: np.ndarray    # boolean mask over grid points
    rule: str
    grid: ThetaGrid

    @property
    def empty(self):
        return not self.members.any()

    @property
    def points(self):
        return self.grid.points[self.members]

    def contains(self, theta):
        return bool(self.members[self.grid.index_of(theta)])


def contour_set(surface: CriterionSurface, c, N=None, rule=FIXED):
    if c < 0:
        raise ValueError("contour level must be >= 0")
    N = surface.N if N is None else N
    return SetEstimate(float(c), N * surface.Q <= c, rule, surface.grid)


def hausdorff(A, B):
    """Hausdorff distance between finite point sets; inf if either is empty."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.size == 0 or B.size == 0:
        return math.inf
    dab = cKDTree(B).query(A)[0].max()
    dba = cKDTree(A).query(B)[0].max()
    return float(max(dab, dba))


def set_expand(mask, eps, points):
    """Grid points within eps of the set given by ``mask``."""
    mask = np.asarray(mask, bool)
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if not mask.any():
        return mask.copy()
    d = cKDTree(points[mask]).query(points)[0]
    return d <= eps + 1e-12


def set_contract(mask, eps, points):
    """Grid erosion: points of the set farther than eps from every grid point outside it."""
    mask = np.asarray(mask, bool)
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return ~set_expand(~mask, eps, points) if eps > 0 else mask.copy()


@dataclass
class SubsampleResult:
    b: int
    B_N: int
    stats: np.ndarray
    c_tau: float
    tau: float
    fallback: bool = False
    blocks: list = field(default_factory=list, repr=False)

    def to_json(self, path=None):
        d = {"b": self.b, "B_N": self.B_N, "c_tau": self.c_tau, "tau": self.tau,
             "fallback": self.fallback, "block_stats": [float(v) for v in self.stats]}
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(d, fh, indent=2)
        return d


def block_layout(N, b_rule="size"):
    """(b, B_N).  ``size``: b = floor(N^0.45); ``count``: B_N = floor(N^0.45)."""
    k = int(math.floor(N ** 0.45))
    if b_rule == "size":
        return k, N // k
    if b_rule == "count":
        return N // k, k
    raise ValueError(f"unknown block rule {b_rule!r}")


def subsample_quantile(aff, surface: CriterionSurface, c, tau=0.1, b_rule="size", seed=0,
                       b=None):
    """Subsampling critical value for the contour set.

    Block j holds b observations of a random partition; its statistic is
    sup over the estimated set of b * Q_{j,b}(theta), using the full-sample
    weights.  The returned level is the upper tau quantile of the block
    statistics, so the region {N Q_N <= c_tau} has nominal coverage 1 - tau.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    N = aff.shape[0]
    if b is None:
        b, B = block_layout(N, b_rule)
    else:
        B = N // b
    if N < 4 * b:
        raise ValueError("need N >= 4 b")
    est = contour_set(surface, c)
    members, fallback = est.members, False
    if est.empty:
        step = float(np.max(surface.grid.step))
        seed_mask = np.zeros(len(members), bool)
        seed_mask[surface.argmin()] = True
        members = set_expand(seed_mask, step, surface.grid.points)
        fallback = True
    pts = surface.grid.points[members]
    w = surface.weights[members]
    perm = np.random.default_rng(seed).permutation(N)[: b * B].reshape(B, b)
    stats = np.empty(B)
    for j in range(B):
        mean_j = affine_eval(aff[perm[j]].mean(axis=0), pts)
        stats[j] = b * positive_part_sq(mean_j, w).max()
    c_tau = float(np.quantile(stats, 1.0 - tau))
    return SubsampleResult(b, B, stats, c_tau, tau, fallback, [p.tolist() for p in perm])
