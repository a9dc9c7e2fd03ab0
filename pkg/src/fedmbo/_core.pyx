# cython: language_level=3
"""Compiled hot loops: counter-based draws and the quadratic-family kernels.

Every function here has a pure-Python counterpart producing the same draws
(``_purepy`` for the hash, the generic numpy paths in ``inner_solver`` and
``hypergradient`` for the kernels).  Stream tags must stay in sync with
``fedmbo.sampling.Tag``.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint64_t

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t SEED_SALT = 0x243F6A8885A308D3ULL
cdef double INV53 = 1.0 / 9007199254740992.0

# fedmbo.sampling.Tag
cdef int64_t TAG_INNER_CLIENT = 1
cdef int64_t TAG_INNER_SAMPLE = 2
cdef int64_t TAG_PHE_CLIENT = 3
cdef int64_t TAG_PHE_UPPER = 4
cdef int64_t TAG_PHE_DEPTH = 5
cdef int64_t TAG_PHE_HESS = 6
cdef int64_t TAG_PHE_FINAL_CLIENT = 7
cdef int64_t TAG_PHE_FINAL_SAMPLE = 8

COMPILED_TAGS = {
    "INNER_CLIENT": 1, "INNER_SAMPLE": 2, "PHE_CLIENT": 3, "PHE_UPPER": 4,
    "PHE_DEPTH": 5, "PHE_HESS": 6, "PHE_FINAL_CLIENT": 7, "PHE_FINAL_SAMPLE": 8,
}


cdef inline uint64_t mix64(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline uint64_t fold(uint64_t key, int64_t label) noexcept nogil:
    return mix64(key ^ ((<uint64_t>label + 1) * GOLDEN))


cdef inline uint64_t root_key(uint64_t seed) noexcept nogil:
    return mix64(seed ^ SEED_SALT)


cdef inline uint64_t key2(uint64_t seed, int64_t a, int64_t b) noexcept nogil:
    return fold(fold(root_key(seed), a), b)


cdef inline uint64_t key3(uint64_t seed, int64_t a, int64_t b, int64_t c) noexcept nogil:
    return fold(key2(seed, a, b), c)


cdef inline uint64_t key4(uint64_t seed, int64_t a, int64_t b, int64_t c,
                          int64_t d) noexcept nogil:
    return fold(key3(seed, a, b, c), d)


cdef inline int64_t draw_index(uint64_t key, int64_t counter, int64_t size) noexcept nogil:
    cdef uint64_t z = mix64(key + (<uint64_t>counter + 1) * GOLDEN)
    cdef double u = <double>(z >> 11) * INV53
    cdef int64_t idx = <int64_t>(u * <double>size)
    if idx > size - 1:
        idx = size - 1
    return idx


def stream_keys(uint64_t seed, labels):
    cdef const int64_t[:, ::1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t L = lab.shape[0], d = lab.shape[1], r, j
    out = np.empty(L, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef uint64_t key
    for r in range(L):
        for j in range(d):
            if lab[r, j] < 0:
                raise ValueError("stream labels must be non-negative")
    with nogil:
        for r in range(L):
            key = root_key(seed)
            for j in range(d):
                key = fold(key, lab[r, j])
            o[r] = key
    return out


def uniform_float(keys, counters):
    cdef const uint64_t[::1] kv = np.ascontiguousarray(keys, dtype=np.uint64)
    cdef int64_t[::1] cv = np.array(
        np.broadcast_to(counters, (kv.shape[0],)), dtype=np.int64)
    out = np.empty(kv.shape[0], dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t r
    cdef uint64_t z
    with nogil:
        for r in range(kv.shape[0]):
            z = mix64(kv[r] + (<uint64_t>cv[r] + 1) * GOLDEN)
            o[r] = <double>(z >> 11) * INV53
    return out


def uniform_index(keys, counters, sizes):
    cdef const uint64_t[::1] kv = np.ascontiguousarray(keys, dtype=np.uint64)
    cdef Py_ssize_t L = kv.shape[0], r
    cdef int64_t[::1] cv = np.array(np.broadcast_to(counters, (L,)), dtype=np.int64)
    cdef int64_t[::1] sv = np.array(np.broadcast_to(sizes, (L,)), dtype=np.int64)
    out = np.empty(L, dtype=np.int64)
    cdef int64_t[::1] o = out
    with nogil:
        for r in range(L):
            o[r] = draw_index(kv[r], cv[r], sv[r])
    return out


def minibatch_sgd_quad(const double[:, :, ::1] A, const double[:, :, ::1] B,
                       const double[:, ::1] c, const int64_t[::1] offsets,
                       const double[::1] x, const double[::1] y0,
                       const double[::1] betas, int64_t n, int64_t S,
                       uint64_t seed, int64_t k):
    """T = len(betas) rounds of server-averaged minibatch SGD on the lower level."""
    cdef Py_ssize_t q = A.shape[1], p = B.shape[2]
    cdef int64_t m = offsets.shape[0] - 1
    cdef int64_t T = betas.shape[0]
    y_arr = np.array(y0, dtype=np.float64, copy=True)
    cdef double[::1] y = y_arr
    cdef double[::1] G = np.zeros(q, dtype=np.float64)
    cdef int64_t t, i, j, cl, s, g, size
    cdef Py_ssize_t r, col
    cdef uint64_t ckey, skey
    cdef double acc, scale = 1.0 / <double>(n * S)
    with nogil:
        for t in range(T):
            for r in range(q):
                G[r] = 0.0
            ckey = key3(seed, TAG_INNER_CLIENT, k, t)
            for i in range(n):
                cl = draw_index(ckey, i, m)
                size = offsets[cl + 1] - offsets[cl]
                skey = key4(seed, TAG_INNER_SAMPLE, k, t, i)
                for j in range(S):
                    s = draw_index(skey, j, size)
                    g = offsets[cl] + s
                    for r in range(q):
                        acc = c[g, r]
                        for col in range(q):
                            acc = acc + A[g, r, col] * y[col]
                        for col in range(p):
                            acc = acc + B[g, r, col] * x[col]
                        G[r] = G[r] + acc
            for r in range(q):
                y[r] = y[r] - betas[t] * (G[r] * scale)
    return y_arr


def phe_quad(const double[:, :, ::1] A, const double[:, :, ::1] B,
             const double[:, :, ::1] V, const double[:, ::1] u,
             const int64_t[::1] offsets, const double[::1] y,
             int64_t N, double ell, const int64_t[::1] ks,
             const int64_t[::1] slots, uint64_t seed):
    """Independent Neumann chains for the quadratic family.

    Chain ``r`` is estimator slot ``slots[r]`` of outer round ``ks[r]``; its
    draws depend only on those labels, so chains may run in any order.
    Returns ``(H, depths)``; the upper-level x-gradient of this family is zero.
    """
    cdef Py_ssize_t q = A.shape[1], p = B.shape[2]
    cdef Py_ssize_t L = ks.shape[0]
    cdef int64_t m = offsets.shape[0] - 1
    H_arr = np.zeros((L, p), dtype=np.float64)
    depth_arr = np.zeros(L, dtype=np.int64)
    cdef double[:, ::1] H = H_arr
    cdef int64_t[::1] depths = depth_arr
    cdef double[::1] pv = np.empty(q, dtype=np.float64)
    cdef double[::1] tmp = np.empty(q, dtype=np.float64)
    cdef Py_ssize_t r, a, b
    cdef int64_t k, i, c0, th, depth, l, cl, s, g, cf, w, size
    cdef uint64_t ukey
    cdef double acc, scale = <double>N / ell, inv_ell = 1.0 / ell
    with nogil:
        for r in range(L):
            k = ks[r]
            i = slots[r]
            c0 = draw_index(key3(seed, TAG_PHE_CLIENT, k, 0), i, m)
            size = offsets[c0 + 1] - offsets[c0]
            ukey = key3(seed, TAG_PHE_UPPER, k, i)
            th = offsets[c0] + draw_index(ukey, 1, size)
            for a in range(q):
                acc = 0.0
                for b in range(q):
                    acc = acc + V[th, a, b] * (y[b] - u[th, b])
                pv[a] = scale * acc
            depth = draw_index(key2(seed, TAG_PHE_DEPTH, k), i, N)
            depths[r] = depth
            for l in range(1, depth + 1):
                cl = draw_index(key3(seed, TAG_PHE_CLIENT, k, l), i, m)
                size = offsets[cl + 1] - offsets[cl]
                g = offsets[cl] + draw_index(key4(seed, TAG_PHE_HESS, k, l, i), 0, size)
                for a in range(q):
                    acc = 0.0
                    for b in range(q):
                        acc = acc + A[g, a, b] * pv[b]
                    tmp[a] = pv[a] - inv_ell * acc
                for a in range(q):
                    pv[a] = tmp[a]
            cf = draw_index(key2(seed, TAG_PHE_FINAL_CLIENT, k), i, m)
            size = offsets[cf + 1] - offsets[cf]
            w = offsets[cf] + draw_index(key3(seed, TAG_PHE_FINAL_SAMPLE, k, i), 0, size)
            for a in range(p):
                acc = 0.0
                for b in range(q):
                    acc = acc + B[w, b, a] * pv[b]
                H[r, a] = -acc
    return H_arr, depth_arr
