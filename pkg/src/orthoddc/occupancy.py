"""Discounted occupancy ratios for policies that deviate from the observed one.

For a policy sigma the discounted occupancy of the observed state law mu is
nu = sum_t beta^t mu P_sigma^t, and the correction terms need its density
ratio omega = d nu / d mu at each observed state.  Each agent's mileage chain
is discretized.  Continuous mileage goes on hat functions over a uniform grid.
The reset state s = 1 and the clipping bounds are separate atoms, since the
observed law has point masses there.  mu is the stationary law under the
observed policy; for that policy omega is 1/(1 - beta) exactly.
"""
import numpy as np
from scipy.special import ndtr

from .dgp import ENTRY


def _hinge(m, c, sd):
    u = (m - c) / sd
    return (m - c) * ndtr(u) + sd * np.exp(-0.5 * u * u) * 0.3989422804014327


def _chain_states(model, n_nodes):
    if model.kind == ENTRY:
        return np.arange(model.s_lo, model.s_hi + 1.0), None
    nodes = np.linspace(model.s_lo, model.s_hi, n_nodes)
    return np.r_[nodes, 1.0, model.s_lo, model.s_hi], nodes


def _bus_kernels(model, nodes, states, mean, sd):
    """Keep-transition probabilities (n, M, M) from each state to each state."""
    h = nodes[1] - nodes[0]
    sdb = sd[:, None, None]
    psi = _hinge(mean[..., None], nodes, sdb)
    w = np.empty_like(psi)
    w[..., 1:-1] = (psi[..., :-2] - 2.0 * psi[..., 1:-1] + psi[..., 2:]) / h
    w[..., 0] = 1.0 - (psi[..., 0] - psi[..., 1]) / h
    w[..., -1] = (psi[..., -2] - psi[..., -1]) / h
    p_lo = ndtr((model.s_lo - mean) / sd[:, None])
    p_hi = ndtr((mean - model.s_hi) / sd[:, None])
    w[..., 0] -= p_lo
    w[..., -1] -= p_hi
    G = nodes.size
    K = np.zeros(mean.shape + (states.size,))
    K[..., :G] = np.maximum(w, 0.0)
    K[..., G + 1] = p_lo
    K[..., G + 2] = p_hi
    return K / K.sum(axis=-1, keepdims=True)


def _stationary(P):
    n, M, _ = P.shape
    A = np.transpose(np.eye(M)[None] - P, (0, 2, 1)).copy()
    A[:, -1, :] = 1.0
    b = np.zeros((n, M))
    b[:, -1] = 1.0
    mu = np.linalg.solve(A, b[..., None])[..., 0]
    return np.maximum(mu, 0.0)


def occupancy_ratios(model, nuis, rows, s_obs, policies, n_nodes=61, chunk=256):
    """omega_sigma at each observed state, shape (n_obs, len(policies))."""
    rows = np.asarray(rows)
    s_obs = np.asarray(s_obs, dtype=float)
    states, nodes = _chain_states(model, n_nodes)
    M = states.size
    beta = model.beta
    out = np.empty((s_obs.size, len(policies)))
    eye = np.eye(M)
    for lo in range(0, s_obs.size, chunk):
        sl = slice(lo, min(s_obs.size, lo + chunk))
        r = rows[sl]
        n = r.size
        ss = np.broadcast_to(states, (n, M))
        rr = np.broadcast_to(r[:, None], (n, M))
        gam = nuis.gamma(ss, rr)
        if model.kind == ENTRY:
            keep = np.zeros((n, M, M))
            nxt = np.minimum(np.arange(M) + 1, M - 1)
            keep[:, np.arange(M), nxt] = 1.0
            reset_idx = int(np.searchsorted(states, 1.0))
        else:
            keep = _bus_kernels(model, nodes, states, nuis.rho_at(ss, rr), nuis.sig[r], )
            reset_idx = nodes.size

        def chain(p):
            P = p[..., None] * keep
            P[..., reset_idx] += 1.0 - p
            return P

        mu = _stationary(chain(gam))
        for j, pol in enumerate(policies):
            p = pol.choice_prob(gam)
            A = np.transpose(eye[None] - beta * chain(p), (0, 2, 1))
            nu = np.linalg.solve(A, mu[..., None])[..., 0]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(mu > 1e-300, nu / mu, 0.0)
            out[sl, j] = _at_states(model, ratio, states, nodes, s_obs[sl])
    return out


def _at_states(model, ratio, states, nodes, s):
    n = s.size
    idx = np.arange(n)
    if model.kind == ENTRY:
        j = np.clip(np.rint(s - states[0]).astype(np.int64), 0, states.size - 1)
        return ratio[idx, j]
    G = nodes.size
    h = nodes[1] - nodes[0]
    u = (s - nodes[0]) / h
    fj = np.clip(np.floor(u), 0, G - 2)
    j = fj.astype(np.int64)
    w = u - fj
    val = (1.0 - w) * ratio[idx, j] + w * ratio[idx, j + 1]
    val = np.where(s == 1.0, ratio[:, G], val)
    val = np.where(s == model.s_lo, ratio[:, G + 1], val)
    return np.where(s == model.s_hi, ratio[:, G + 2], val)
