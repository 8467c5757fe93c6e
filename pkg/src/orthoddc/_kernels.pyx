# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled forward-simulation kernels.

``draw_block`` fills shock arrays from the counter-based streams of
``orthoddc.rng``; ``rollout`` consumes them.  Both mirror ``_pykernels``.
"""
from libc.math cimport log, sqrt, cos, M_PI
from libc.stdint cimport uint64_t, int64_t
import numpy as np

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t SALT = 0x243F6A8885A308D3ULL
cdef double TWO53 = 1.0 / 9007199254740992.0


cdef inline uint64_t mix64(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double unif(uint64_t k, uint64_t c) noexcept nogil:
    cdef uint64_t h = mix64(k + (c + 1) * GOLDEN)
    return (<double>(h >> 11) + 0.5) * TWO53


cdef inline double interp(const double[:, ::1] tab, int64_t r, double s,
                          double lo, double inv) noexcept nogil:
    cdef int64_t g = tab.shape[1]
    cdef double u = (s - lo) * inv
    cdef int64_t j = 0
    if u > 0:
        j = <int64_t>u
        if j > g - 2:
            j = g - 2
    cdef double w = u - <double>j
    return (1.0 - w) * tab[r, j] + w * tab[r, j + 1]


def draw_block(uint64_t seed, const int64_t[::1] key, bint antithetic,
               double[:, :, ::1] l0, double[:, :, ::1] l1, double[:, :, ::1] uc,
               double[:, :, ::1] uo, double[:, :, ::1] z):
    """Fill (n, T, P) shock arrays for the start keys ``key``."""
    cdef Py_ssize_t n = l0.shape[0], nsteps = l0.shape[1], n_paths = l0.shape[2]
    cdef Py_ssize_t i, p, q, t
    cdef uint64_t k0 = mix64(seed ^ SALT), kk, base
    cdef double zz
    with nogil:
        for i in range(n):
            for p in range(n_paths):
                q = p // 2 if antithetic else p
                kk = mix64(mix64(k0 ^ ((<uint64_t>key[i] + 1) * GOLDEN)) ^ ((<uint64_t>q + 1) * GOLDEN))
                for t in range(nsteps):
                    base = <uint64_t>t * 8
                    l0[i, t, p] = log(-log(unif(kk, base + 0)))
                    l1[i, t, p] = log(-log(unif(kk, base + 1)))
                    uc[i, t, p] = unif(kk, base + 2)
                    uo[i, t, p] = unif(kk, base + 3)
                    zz = sqrt(-2.0 * log(unif(kk, base + 4))) * cos(2.0 * M_PI * unif(kk, base + 5))
                    if t == 0 and antithetic and p % 2 == 1:
                        zz = -zz
                    z[i, t, p] = zz


def rollout(int model_kind, const double[::1] s0, const int64_t[::1] row,
            int first_action, bint coin, double dev0,
            const double[:, ::1] logit_tab, const double[:, ::1] rho_tab,
            const double[::1] sig, const double[:, ::1] opp_tab,
            double grid_lo, double grid_inv, double s_min, double s_max,
            double logit_cap, double beta, int horizon, double delta0,
            double first_shift, const double[:, :, ::1] l0, const double[:, :, ::1] l1,
            const double[:, :, ::1] uc, const double[:, :, ::1] uo,
            const double[:, :, ::1] z,
            double[:, :, ::1] out, double[:, ::1] znoise):
    """Discounted basis sums per (start, path) into ``out`` (n, P, k+1).

    Paths of one start advance together (time outer, path inner) so their
    independent dependency chains overlap.
    """
    cdef Py_ssize_t n = s0.shape[0], n_paths = l0.shape[2]
    cdef int k = out.shape[2] - 1
    cdef bint forced = first_action >= 0
    cdef int nsteps = horizon + 1 if forced else horizon
    cdef Py_ssize_t i, p, j
    cdef int t
    cdef int64_t r
    cdef double s, d, lg, eps, nxt, sgm, shift
    cdef bint a, ap, skip
    if l0.shape[1] < nsteps:
        raise ValueError("shock block shorter than the horizon")
    cdef double[::1] S = np.empty(n_paths)
    with nogil:
        for i in range(n):
            r = row[i]
            sgm = sig[r]
            for p in range(n_paths):
                S[p] = s0[i]
                znoise[i, p] = 0.0
                for j in range(k + 1):
                    out[i, p, j] = 0.0
            d = 1.0
            for t in range(nsteps):
                skip = forced and t == 0
                shift = first_shift if t == 0 else 0.0
                for p in range(n_paths):
                    s = S[p]
                    if skip:
                        a = first_action == 1
                    elif coin:
                        a = uc[i, t, p] < 0.5
                    else:
                        lg = interp(logit_tab, r, s, grid_lo, grid_inv)
                        if lg > logit_cap:
                            lg = logit_cap
                        elif lg < -logit_cap:
                            lg = -logit_cap
                        a = (l0[i, t, p] - l1[i, t, p]) >= dev0 - lg
                    if not skip:
                        eps = -l1[i, t, p] if a else -l0[i, t, p]
                        if a:
                            out[i, p, 1] -= s * d
                        else:
                            out[i, p, 0] -= d
                        if model_kind == 1:
                            ap = uo[i, t, p] < interp(opp_tab, r, s, grid_lo, grid_inv)
                            if ap:
                                if a:
                                    out[i, p, 2] += d
                                out[i, p, k] += d * (eps + delta0)
                            else:
                                out[i, p, k] += d * eps
                        else:
                            out[i, p, k] += d * eps
                    if model_kind == 1:
                        if a:
                            s = s + 1.0
                            if s > s_max:
                                s = s_max
                        else:
                            s = 1.0
                    elif a:
                        if t == 0:
                            znoise[i, p] = z[i, t, p]
                        nxt = interp(rho_tab, r, s, grid_lo, grid_inv) + sgm * z[i, t, p]
                        if t == 0:
                            nxt = nxt + shift
                        if nxt < s_min:
                            nxt = s_min
                        elif nxt > s_max:
                            nxt = s_max
                        s = nxt
                    else:
                        s = 1.0
                    S[p] = s
                if not skip:
                    d *= beta
    return out, znoise
