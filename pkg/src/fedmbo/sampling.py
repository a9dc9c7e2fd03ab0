"""Counter-based random streams for every draw the simulation makes.

A stream is identified by a root seed and a tuple of non-negative integer
labels (purpose tag first, then round/step/slot indices).  Draw ``j`` of a
stream is a pure function of ``(seed, labels, j)``, so values never depend on
execution order, thread count or how many other draws happened before.

Label conventions (``k`` outer round, ``t`` inner step, ``l`` communication
round of the hypergradient procedure, ``i`` estimator or client slot):

==================  =====================  =========================
tag                 labels                 draw counter
==================  =====================  =========================
INNER_CLIENT        (k, t)                 slot i
INNER_SAMPLE        (k, t, i)              minibatch position j
PHE_CLIENT          (k, l)                 chain i  (l = 0 is C^0)
PHE_UPPER           (k, i)                 0 = phi data, 1 = theta data
PHE_DEPTH           (k,)                   chain i
PHE_HESS            (k, l, i)              0
PHE_FINAL_CLIENT    (k,)                   chain i
PHE_FINAL_SAMPLE    (k, i)                 0
IHGP_CLIENT         (k, l)                 slot i
IHGP_UPPER          (k, i)                 0 = phi data, 1 = theta data
IHGP_DEPTH          (k,)                   0
IHGP_HESS           (k, l, i)              0
IHGP_FINAL_CLIENT   (k,)                   slot i
IHGP_FINAL_SAMPLE   (k, i)                 0
==================  =====================  =========================

Local SGD reuses the inner tags: aggregation ``r`` draws clients from
``(INNER_CLIENT, k, r)`` and local step ``tau`` of slot ``i`` draws samples
from ``(INNER_SAMPLE, k, r * T_local + tau, i)``.
"""

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import backend


class Tag(IntEnum):
    INNER_CLIENT = 1
    INNER_SAMPLE = 2
    PHE_CLIENT = 3
    PHE_UPPER = 4
    PHE_DEPTH = 5
    PHE_HESS = 6
    PHE_FINAL_CLIENT = 7
    PHE_FINAL_SAMPLE = 8
    IHGP_CLIENT = 9
    IHGP_UPPER = 10
    IHGP_DEPTH = 11
    IHGP_HESS = 12
    IHGP_FINAL_SAMPLE = 13
    IHGP_FINAL_CLIENT = 14
    REPLICATE = 20
    FAMILY = 21
    PROBE = 22
    START = 23


def _check_labels(labels):
    out = tuple(int(v) for v in labels)
    if any(v < 0 for v in out):
        raise ValueError(f"stream labels must be non-negative, got {out}")
    return out


@dataclass(frozen=True)
class RngStream:
    """A labelled stream of uniform draws."""

    seed: int
    labels: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)
        object.__setattr__(self, "labels", _check_labels(self.labels))

    def child(self, *labels):
        return RngStream(self.seed, self.labels + _check_labels(labels))

    @property
    def key(self):
        lab = np.asarray([self.labels], dtype=np.int64).reshape(1, len(self.labels))
        return backend.stream_keys(self.seed, lab)[0]

    def uniform(self, count, start=0):
        """Draws ``start .. start+count-1`` as floats in [0, 1)."""
        keys = np.full(count, self.key, dtype=np.uint64)
        return backend.uniform_float(keys, np.arange(start, start + count, dtype=np.int64))

    def integers(self, size, count, start=0):
        """``count`` uniform integers in ``[0, size)`` from consecutive counters."""
        if size < 1:
            raise ValueError("size must be at least 1")
        keys = np.full(count, self.key, dtype=np.uint64)
        counters = np.arange(start, start + count, dtype=np.int64)
        return backend.uniform_index(keys, counters, np.int64(size))


def derive_seed(seed, *labels):
    """A 64-bit seed derived from ``seed`` and labels (e.g. replicate index)."""
    return int(RngStream(seed, labels).key)


def batched_index(seed, labels, counters, sizes):
    """Vectorised draws: row ``r`` of ``labels`` names the stream for draw ``r``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim == 1:
        labels = labels[:, None]
    keys = backend.stream_keys(seed, labels)
    return backend.uniform_index(keys, np.asarray(counters, dtype=np.int64),
                                 np.asarray(sizes, dtype=np.int64))


def label_rows(tag, *columns):
    """Stack a tag and broadcastable label columns into an (L, d) label array."""
    cols = np.broadcast_arrays(*[np.asarray(c, dtype=np.int64) for c in columns])
    length = cols[0].size if cols else 1
    out = np.empty((length, len(cols) + 1), dtype=np.int64)
    out[:, 0] = int(tag)
    for j, col in enumerate(cols):
        out[:, j + 1] = col.ravel()
    return out


def sample_clients(m, n, stream, replace=True):
    """Ordered list of ``n`` client ids in ``[0, m)``.

    With replacement (default) the draws are i.i.d.; otherwise a partial
    Fisher-Yates shuffle driven by the same counters returns distinct ids.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if n < 1:
        raise ValueError("n must be at least 1")
    if replace:
        return stream.integers(m, n)
    if n > m:
        raise ValueError("sampling without replacement requires n <= m")
    u = stream.uniform(n)
    perm = np.arange(m, dtype=np.int64)
    for i in range(n):
        j = i + min(int(u[i] * (m - i)), m - i - 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm[:n].copy()


def sample_minibatch(dataset_size, S, stream):
    """``S`` i.i.d. uniform sample indices in ``[0, dataset_size)``."""
    if S < 1:
        raise ValueError("minibatch size S must be at least 1")
    if dataset_size < 1:
        raise ValueError("dataset must be non-empty")
    return stream.integers(dataset_size, S)


def sample_neumann_depth(N, stream, counter=0):
    """Uniform depth in ``{0, ..., N-1}``."""
    if N < 1:
        raise ValueError("Neumann truncation N must be at least 1")
    return int(stream.integers(N, 1, start=counter)[0])
