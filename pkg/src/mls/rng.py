"""Deterministic, stateless random streams.

Every stream is keyed by a tuple of integers, e.g. ``(seed, DOMAIN_AUG,
epoch, index)``. The key is folded through splitmix64 into one 64-bit
word that seeds a numpy ``PCG64`` bit generator. Only ``Generator.random``
(53-bit doubles) is drawn from; integers and permutations are derived
from those doubles so the stream does not depend on numpy's
distribution code.
"""
import numpy as np

MASK64 = (1 << 64) - 1

DOMAIN_SCENE = 1
DOMAIN_AUG = 2
DOMAIN_PERM = 3
DOMAIN_INIT = 4
DOMAIN_EVAL = 5
DOMAIN_SPLIT = 6
DOMAIN_QUERY = 7


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(*keys):
    h = 0x6A09E667F3BCC909
    for k in keys:
        h = splitmix64(h ^ (int(k) & MASK64))
    return h


def stream(*keys):
    return np.random.Generator(np.random.PCG64(derive_seed(*keys)))


def randint(rng, n):
    """Uniform integer in ``[0, n)``."""
    return min(int(rng.random() * n), n - 1)


def permutation(rng, n):
    """Fisher-Yates shuffle of ``range(n)`` driven by uniform doubles."""
    perm = np.arange(n, dtype=np.int64)
    u = rng.random(max(n - 1, 0))
    for i in range(n - 1, 0, -1):
        j = min(int(u[n - 1 - i] * (i + 1)), i)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def sample_without_replacement(rng, n, k):
    return permutation(rng, n)[:k]
