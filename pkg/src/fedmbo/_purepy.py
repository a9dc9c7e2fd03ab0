"""Pure numpy implementations of the counter-based hash used for every draw.

These mirror ``_core.pyx`` bit for bit: a label tuple is folded into a 64-bit
stream key with the SplitMix64 finalizer, and draw ``j`` of a stream is the
finalizer applied to ``key + (j + 1) * GOLDEN``.  The top 53 bits become a
double in [0, 1) which is scaled onto ``[0, size)``.
"""

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
SEED_SALT = np.uint64(0x243F6A8885A308D3)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0


def mix64(z):
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def stream_keys(seed, labels):
    """Fold each row of ``labels`` (int64, shape (L, d)) into a stream key."""
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if labels.ndim != 2:
        raise ValueError("labels must be a 2-d array of label rows")
    if labels.size and labels.min() < 0:
        raise ValueError("stream labels must be non-negative")
    key = mix64(np.full(labels.shape[0], np.uint64(seed) ^ SEED_SALT, dtype=np.uint64))
    for j in range(labels.shape[1]):
        lab = labels[:, j].astype(np.uint64)
        with np.errstate(over="ignore"):
            mixed = key ^ ((lab + _ONE) * GOLDEN)
        key = mix64(mixed)
    return key


def uniform_float(keys, counters):
    """Draw ``counters`` of each stream as doubles in [0, 1)."""
    keys = np.asarray(keys, dtype=np.uint64)
    counters = np.asarray(counters, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        z = mix64(keys + (counters + _ONE) * GOLDEN)
    return (z >> _S11).astype(np.float64) * _INV53


def uniform_index(keys, counters, sizes):
    """Uniform integers in ``[0, sizes)`` from the given stream positions."""
    sizes = np.asarray(sizes, dtype=np.int64)
    u = uniform_float(keys, counters)
    idx = (u * sizes.astype(np.float64)).astype(np.int64)
    return np.minimum(idx, sizes - 1)
