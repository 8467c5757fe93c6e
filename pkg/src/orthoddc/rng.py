"""Counter-based random numbers.

Every draw is a pure function of ``(seed, a, b, counter)``: the triple
``(seed, a, b)`` selects a SplitMix64 stream and ``counter`` the position in
it.  Draws therefore do not depend on how work is batched or ordered, and the
compiled kernel reproduces them bit for bit.
"""
import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_SEED_SALT = np.uint64(0x243F6A8885A308D3)
_TWO53 = 2.0 ** -53

# slots within one simulated period
SLOT_EPS0, SLOT_EPS1, SLOT_COIN, SLOT_OPP, SLOT_N1, SLOT_N2 = range(6)
SLOTS_PER_STEP = 8


def mix64(z):
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_key(seed, a, b):
    """Key of the stream indexed by ``(seed, a, b)``; broadcasts over a and b."""
    one = np.uint64(1)
    with np.errstate(over="ignore"):
        k = mix64(np.uint64(seed) ^ _SEED_SALT)
        k = mix64(k ^ ((np.asarray(a, dtype=np.uint64) + one) * GOLDEN))
        k = mix64(k ^ ((np.asarray(b, dtype=np.uint64) + one) * GOLDEN))
    return k


def uniform(key, counter):
    """Uniform on the open interval (0, 1) at position ``counter`` of ``key``."""
    with np.errstate(over="ignore"):
        h = mix64(np.asarray(key, dtype=np.uint64)
                  + (np.asarray(counter, dtype=np.uint64) + np.uint64(1)) * GOLDEN)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO53


def gumbel(key, counter):
    return -np.log(-np.log(uniform(key, counter)))


def normal(key, c1, c2):
    """Box-Muller standard normal from two positions of the stream."""
    u1 = uniform(key, c1)
    u2 = uniform(key, c2)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
