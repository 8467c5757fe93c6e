"""Pure numpy forward-simulation kernels (fallback for the compiled core).

Vectorized over (start state, path) and looped over time.  Semantics and
random numbers match ``_kernels.pyx``; see ``valuesim`` for the contract.
"""
import numpy as np

from . import rng


def _interp(tab, rows, s, lo, inv):
    g = tab.shape[1]
    u = (s - lo) * inv
    j = np.minimum(np.where(u > 0, u, 0.0).astype(np.int64), g - 2)
    w = u - j
    return (1.0 - w) * tab[rows, j] + w * tab[rows, j + 1]


def draw_block(seed, key, antithetic, l0, l1, uc, uo, z):
    n, nsteps, n_paths = l0.shape
    paths = np.arange(n_paths)
    pair = paths // 2 if antithetic else paths
    keys = rng.stream_key(seed, np.asarray(key)[:, None, None], pair[None, None, :])
    base = np.arange(nsteps, dtype=np.uint64)[None, :, None] * np.uint64(rng.SLOTS_PER_STEP)
    l0[...] = np.log(-np.log(rng.uniform(keys, base + np.uint64(rng.SLOT_EPS0))))
    l1[...] = np.log(-np.log(rng.uniform(keys, base + np.uint64(rng.SLOT_EPS1))))
    uc[...] = rng.uniform(keys, base + np.uint64(rng.SLOT_COIN))
    uo[...] = rng.uniform(keys, base + np.uint64(rng.SLOT_OPP))
    z[...] = rng.normal(keys, base + np.uint64(rng.SLOT_N1), base + np.uint64(rng.SLOT_N2))
    if antithetic:
        z[:, 0, 1::2] *= -1.0


def rollout(model_kind, s0, row, first_action, coin, dev0,
            logit_tab, rho_tab, sig, opp_tab,
            grid_lo, grid_inv, s_min, s_max, logit_cap, beta, horizon, delta0,
            first_shift, l0, l1, uc, uo, z, out, znoise):
    n, n_paths = l0.shape[0], l0.shape[2]
    k = out.shape[2] - 1
    forced = first_action >= 0
    nsteps = horizon + 1 if forced else horizon
    if l0.shape[1] < nsteps:
        raise ValueError("shock block shorter than the horizon")
    rows = np.broadcast_to(np.asarray(row)[:, None], (n, n_paths))
    sg = np.asarray(sig)[rows]
    s = np.repeat(np.asarray(s0, dtype=np.float64)[:, None], n_paths, axis=1)
    acc = np.zeros((n, n_paths, k + 1))
    znoise[...] = 0.0
    d = 1.0
    for t in range(nsteps):
        if forced and t == 0:
            a = np.full((n, n_paths), first_action == 1)
        elif coin:
            a = uc[:, t, :] < 0.5
        else:
            lg = np.clip(_interp(logit_tab, rows, s, grid_lo, grid_inv), -logit_cap, logit_cap)
            a = (l0[:, t, :] - l1[:, t, :]) >= dev0 - lg
        if not (forced and t == 0):
            acc[..., 0] -= np.where(a, 0.0, d)
            acc[..., 1] -= np.where(a, s * d, 0.0)
            eps = np.where(a, -l1[:, t, :], -l0[:, t, :])
            if model_kind == 1:
                ap = uo[:, t, :] < _interp(opp_tab, rows, s, grid_lo, grid_inv)
                acc[..., 2] += np.where(a & ap, d, 0.0)
                acc[..., k] += np.where(ap, d * (eps + delta0), d * eps)
            else:
                acc[..., k] += d * eps
            d *= beta
        if model_kind == 1:
            s = np.where(a, np.minimum(s + 1.0, s_max), 1.0)
        else:
            if t == 0:
                znoise[...] = np.where(a, z[:, 0, :], 0.0)
            nxt = _interp(rho_tab, rows, s, grid_lo, grid_inv) + sg * z[:, t, :]
            if t == 0:
                nxt = nxt + first_shift
            nxt = np.clip(nxt, s_min, s_max)
            s = np.where(a, nxt, 1.0)
    out[...] = acc
    return out, znoise
