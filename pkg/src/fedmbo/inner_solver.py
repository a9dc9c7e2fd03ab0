"""Lower-level solvers run inside each outer round.

``minibatch_sgd_lower`` is the server-averaged minibatch SGD loop: every
inner step samples ``n`` clients, each evaluates a size-``S`` minibatch
gradient at the shared iterate, and the server takes one step with the
average.  ``local_sgd_lower`` is the FedAvg-style baseline in which sampled
clients take several local steps before their iterates are averaged.
"""

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import ConfigError
from .problems import QuadraticFamily
from .sampling import RngStream, Tag, label_rows, batched_index, sample_clients


@dataclass(frozen=True)
class InnerConfig:
    T: int
    S: int
    n: int
    beta: float
    replace: bool = True

    def validate(self, l_g1):
        for name in ("T", "S", "n"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1", key=name)
        check_beta(self.beta, l_g1)


@dataclass(frozen=True)
class InnerResult:
    y: np.ndarray
    comm_rounds: int
    samples_used: int


def check_beta(beta, l_g1):
    cap = 1.0 / (2.0 * l_g1)
    if not (beta > 0 and beta <= cap * (1 + 1e-12)):
        raise ConfigError(f"inner step {beta!r} violates 0 < beta ≤ 1/(2*l_g1) = {cap!r}",
                          key="beta")


def _client_draw(seed, tag, k, r, n, m, replace):
    stream = RngStream(seed, (tag, k, r))
    return sample_clients(m, n, stream, replace=replace)


def _sample_indices(family, seed, k, step, clients, S):
    """Global lower sample indices, shape (n, S), for inner step label ``step``."""
    n = len(clients)
    keys_lab = label_rows(Tag.INNER_SAMPLE, k, step, np.arange(n))
    lab = np.repeat(keys_lab, S, axis=0)
    sizes = np.repeat(family.lower_sizes[clients], S)
    draws = batched_index(seed, lab, np.tile(np.arange(S), n), sizes)
    return (family.lower_offsets[clients][:, None] + draws.reshape(n, S))


def minibatch_sgd_lower(family, x, y0, config, seed, k=0, backend_name=None):
    """``config.T`` server-averaged minibatch SGD steps from ``y0`` at fixed ``x``."""
    config.validate(family.l_g1)
    x = family.check_x(x)
    y = family.check_y(y0).copy()
    T, S, n = config.T, config.S, config.n
    samples = T * n * S
    core = backend.kernels(backend_name)
    if core is not None and config.replace and isinstance(family, QuadraticFamily):
        betas = np.full(T, float(config.beta))
        y = core.minibatch_sgd_quad(family.A, family.B, family.c, family.lower_offsets, x, y,
                                    betas, n, S, np.uint64(RngStream(seed).seed), k)
        return InnerResult(y, T, samples)
    for t in range(T):
        clients = _client_draw(seed, Tag.INNER_CLIENT, k, t, n, family.m, config.replace)
        idx = _sample_indices(family, seed, k, t, clients, S).ravel()
        G = family.lower_grad_y(x, np.broadcast_to(y, (len(idx), family.q)), idx).mean(axis=0)
        y = y - config.beta * G
    return InnerResult(y, T, samples)


def local_sgd_lower(family, x, y0, T_local, S, n, beta, seed, k=0, rounds=1, replace=True):
    """FedAvg-style lower solve: ``rounds`` aggregations of ``T_local`` local steps.

    Aggregation ``r`` draws clients from the same stream as inner step ``r``
    of the minibatch solver, and local step ``tau`` uses the sample stream of
    inner step ``r * T_local + tau``; with ``T_local = 1`` the two solvers
    therefore coincide draw for draw.
    """
    if T_local < 0 or S < 1 or n < 1 or rounds < 1:
        raise ConfigError("need T_local >= 0 and S, n, rounds >= 1", key="T_local")
    check_beta(beta, family.l_g1)
    x = family.check_x(x)
    y = family.check_y(y0).copy()
    if T_local == 0:
        return InnerResult(y, 0, 0)
    for r in range(rounds):
        clients = _client_draw(seed, Tag.INNER_CLIENT, k, r, n, family.m, replace)
        local = np.repeat(y[None], n, axis=0)
        for tau in range(T_local):
            idx = _sample_indices(family, seed, k, r * T_local + tau, clients, S)
            yb = np.repeat(local, S, axis=0)
            G = family.lower_grad_y(x, yb, idx.ravel()).reshape(n, S, family.q).mean(axis=1)
            local = local - beta * G
        y = local.mean(axis=0)
    return InnerResult(y, rounds, rounds * n * T_local * S)


def contraction_bound(err0, betas, mu_g, sigma_g1_2, sigma_g_2, n, S):
    """Right-hand side of the expected inner-error recursion after ``len(betas)`` steps."""
    betas = np.asarray(betas, dtype=np.float64)
    return (float(np.prod(1.0 - betas * mu_g)) * err0
            + 4.0 * (sigma_g1_2 + sigma_g_2) / (n * S) * float(np.sum(betas ** 2)))
