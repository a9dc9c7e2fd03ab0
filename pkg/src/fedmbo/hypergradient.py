"""Federated hypergradient estimators and their exact reference values.

``phe_estimate`` builds ``n`` independent Neumann chains.  Chain ``i`` draws
a client and two upper-level samples (one for the x-gradient, one for the
y-gradient that seeds the chain), a uniform depth ``N_i``, then one fresh
client and Hessian sample per communication round while it is active, and a
final fresh client for the mixed derivative:

    H_i = grad_x f(phi) - J(w) (N / l) prod_{l <= N_i} (I - Hess(l) / l) grad_y f(theta)

``ihgp_estimate`` is the shared-chain baseline: one chain seeded with the
client-averaged upper gradient, one shared depth, and per-round Hessians
averaged over the participants, reused by every participant.
"""

from dataclasses import dataclass

import numpy as np

from . import backend
from .problems import QuadraticFamily
from .sampling import Tag, batched_index, label_rows, RngStream

CHUNK = 8192


@dataclass(frozen=True)
class HypergradientBatch:
    estimates: np.ndarray
    depths: np.ndarray
    comm_rounds: int
    upper_samples: int
    lower_samples: int

    @property
    def mean(self):
        return self.estimates.mean(axis=0)

    @property
    def samples_used(self):
        return self.upper_samples + self.lower_samples


def _check(N, n):
    if N < 1:
        raise ValueError("Neumann truncation N must be at least 1")
    if n < 1:
        raise ValueError("number of chains n must be at least 1")


def _draw(seed, tag, labels, counters, sizes):
    return batched_index(seed, label_rows(tag, *labels), counters, sizes)


def _phe_chunk(family, x, y, N, ell, ks, slots, seed):
    m = family.m
    lo, up = family.lower_offsets, family.upper_offsets
    L = len(ks)
    c0 = _draw(seed, Tag.PHE_CLIENT, (ks, 0), slots, m)
    up_lab = label_rows(Tag.PHE_UPPER, ks, slots)
    sizes = family.upper_sizes[c0]
    phi = up[c0] + batched_index(seed, up_lab, 0, sizes)
    theta = up[c0] + batched_index(seed, up_lab, 1, sizes)
    yb = np.broadcast_to(y, (L, family.q))
    d = family.upper_grad_x(x, yb, phi)
    pv = (N / ell) * family.upper_grad_y(x, yb, theta)
    depth = _draw(seed, Tag.PHE_DEPTH, (ks,), slots, N)
    for l in range(1, int(depth.max(initial=0)) + 1):
        act = np.nonzero(depth >= l)[0]
        cl = _draw(seed, Tag.PHE_CLIENT, (ks[act], l), slots[act], m)
        g = lo[cl] + _draw(seed, Tag.PHE_HESS, (ks[act], l, slots[act]), 0, family.lower_sizes[cl])
        pv[act] = pv[act] - family.lower_hvp_yy(x, yb[act], pv[act], g) / ell
    cf = _draw(seed, Tag.PHE_FINAL_CLIENT, (ks,), slots, m)
    w = lo[cf] + _draw(seed, Tag.PHE_FINAL_SAMPLE, (ks, slots), 0, family.lower_sizes[cf])
    return d - family.lower_jvp_xy(x, yb, pv, w), depth


def phe_chains(family, x, y, N, ks, slots, seed, ell=None, backend_name=None):
    """Run the chains labelled ``(ks[r], slots[r])``; returns ``(H, depths)``.

    Each chain depends only on its own labels, so any subset or ordering of
    chains reproduces the same values.
    """
    x = family.check_x(x)
    y = family.check_y(y)
    ell = family.l_g1 if ell is None else float(ell)
    ks = np.asarray(ks, dtype=np.int64)
    slots = np.asarray(slots, dtype=np.int64)
    core = backend.kernels(backend_name)
    if core is not None and isinstance(family, QuadraticFamily):
        return core.phe_quad(family.A, family.B, family.V, family.u, family.lower_offsets, y,
                             int(N), ell, ks, slots, np.uint64(RngStream(seed).seed))
    H = np.empty((len(ks), family.p))
    depth = np.empty(len(ks), dtype=np.int64)
    for lo in range(0, len(ks), CHUNK):
        sl = slice(lo, lo + CHUNK)
        H[sl], depth[sl] = _phe_chunk(family, x, y, N, ell, ks[sl], slots[sl], seed)
    return H, depth


def phe_estimate(family, x, y, N, n, seed, k=0, ell=None, backend_name=None):
    """One PHE invocation at ``(x, y)`` for outer round ``k``."""
    _check(N, n)
    H, depths = phe_chains(family, x, y, N, np.full(n, k), np.arange(n), seed, ell, backend_name)
    top = int(depths.max())
    return HypergradientBatch(H, depths, top + 2, 2 * n, int(depths.sum()) + n)


def ihgp_chains(family, x, y, N, ks, n, seed, ell=None):
    """Shared-chain estimators for each round label in ``ks``; returns ((T, n, p), depths)."""
    x = family.check_x(x)
    y = family.check_y(y)
    ell = family.l_g1 if ell is None else float(ell)
    ks = np.asarray(ks, dtype=np.int64)
    Tn = len(ks)
    m, q = family.m, family.q
    lo, up = family.lower_offsets, family.upper_offsets
    kk = np.repeat(ks, n)
    ii = np.tile(np.arange(n), Tn)
    yb = np.broadcast_to(y, (Tn * n, q))
    c0 = _draw(seed, Tag.IHGP_CLIENT, (kk, 0), ii, m)
    up_lab = label_rows(Tag.IHGP_UPPER, kk, ii)
    sizes = family.upper_sizes[c0]
    phi = up[c0] + batched_index(seed, up_lab, 0, sizes)
    theta = up[c0] + batched_index(seed, up_lab, 1, sizes)
    d = family.upper_grad_x(x, yb, phi)
    pv = (N / ell) * family.upper_grad_y(x, yb, theta).reshape(Tn, n, q).mean(axis=1)
    depth = _draw(seed, Tag.IHGP_DEPTH, (ks,), 0, N)
    for l in range(1, int(depth.max(initial=0)) + 1):
        act = np.nonzero(depth >= l)[0]
        ka = np.repeat(ks[act], n)
        ia = np.tile(np.arange(n), len(act))
        cl = _draw(seed, Tag.IHGP_CLIENT, (ka, l), ia, m)
        g = lo[cl] + _draw(seed, Tag.IHGP_HESS, (ka, l, ia), 0, family.lower_sizes[cl])
        pa = np.repeat(pv[act], n, axis=0)
        hv = family.lower_hvp_yy(x, yb[:len(ka)], pa, g).reshape(len(act), n, q).mean(axis=1)
        pv[act] = pv[act] - hv / ell
    cf = _draw(seed, Tag.IHGP_FINAL_CLIENT, (kk,), ii, m)
    w = lo[cf] + _draw(seed, Tag.IHGP_FINAL_SAMPLE, (kk, ii), 0, family.lower_sizes[cf])
    H = d - family.lower_jvp_xy(x, yb, np.repeat(pv, n, axis=0), w)
    return H.reshape(Tn, n, family.p), depth


def ihgp_estimate(family, x, y, N, n, seed, k=0, ell=None):
    """Shared-chain baseline estimator with ``n`` participants."""
    _check(N, n)
    H, depth = ihgp_chains(family, x, y, N, [k], n, seed, ell)
    top = int(depth[0])
    return HypergradientBatch(H[0], np.full(n, top), top + 2, 2 * n, n * top + n)


def exact_surrogate_gradient(family, x, y):
    """Implicit-gradient formula evaluated at an arbitrary ``y`` with exact means."""
    return family.surrogate_gradient(x, y)


def neumann_sum(H, v, N, ell):
    """``(1/ell) sum_{j<N} (I - H/ell)^j v`` by repeated products."""
    term = np.array(v, dtype=np.float64)
    acc = np.zeros_like(term)
    for _ in range(N):
        acc += term
        term = term - H @ term / ell
    return acc / ell


def expected_phe(family, x, y, N, ell=None):
    """Exact conditional mean of a single PHE chain."""
    x = family.check_x(x)
    y = family.check_y(y)
    ell = family.l_g1 if ell is None else float(ell)
    gx, gy = family.mean_upper_grad(x, y)
    H = family.mean_lower_hessian_yy(x, y)
    return gx - family.mean_cross_xy(x, y) @ neumann_sum(H, gy, N, ell)


def batch_statistics(batch):
    """JSON-ready summary of one estimator batch."""
    est = batch.estimates
    cov_trace = float(np.trace(np.atleast_2d(np.cov(est, rowvar=False)))) if len(est) > 1 else 0.0
    hist = np.bincount(batch.depths).tolist()
    return {"mean": batch.mean.tolist(), "cov_trace": cov_trace, "depth_histogram": hist,
            "comm_rounds": batch.comm_rounds, "upper_samples": batch.upper_samples,
            "lower_samples": batch.lower_samples}
