"""Bilevel problem families with exact derivative oracles.

Every client holds a finite dataset of sample components.  The lower loss of
a client is the mean of its per-sample lower losses, the global objective is
the unweighted mean over clients, and stochastic oracles draw a uniform sample
index.  Two families are provided:

* ``QuadraticFamily``: per sample ``g = 1/2 y'Ay + (Bx + c)'y`` and
  ``f = 1/2 (y - u)'V(y - u)``.  All references are closed form.
* ``HyperRepFamily``: a linear representation ``W`` (the outer variable,
  flattened row-major) feeding a ridge-regularised linear head ``omega``
  (the inner variable).  Lower losses use training samples, upper losses the
  validation samples of each client.

Batched oracles take *global* sample indices (``offsets[c] + s`` for sample
``s`` of client ``c``) so that many chains or clients can be evaluated in one
vectorised call.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .sampling import Tag, derive_seed


@dataclass(frozen=True)
class SampleComponent:
    """One quadratic sample: lower ``1/2 y'Ay + (Bx+c)'y``, upper ``1/2 (y-u)'V(y-u)``."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    u: np.ndarray
    V: np.ndarray

    @property
    def dims(self):
        return self.B.shape[1], self.B.shape[0]


@dataclass(frozen=True)
class HyperRepComponent:
    """One regression sample ``(a, b)`` for the representation/head problem."""

    a: np.ndarray
    b: float
    rho: float
    d_rep: int

    @property
    def dims(self):
        return self.d_rep * self.a.shape[0], self.d_rep


@dataclass
class ClientProblem:
    client_id: int
    dataset: list
    validation: list = None

    def __post_init__(self):
        if not self.dataset:
            raise ValueError("client dataset must be non-empty")
        dims = {comp.dims for comp in self.dataset}
        if self.validation:
            dims |= {comp.dims for comp in self.validation}
        if len(dims) != 1:
            raise ValueError("all components of a client must share dimensions")

    @property
    def dims(self):
        return self.dataset[0].dims

    @property
    def upper_dataset(self):
        return self.validation if self.validation else self.dataset


def _vec(v, dim, name):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.shape != (dim,):
        raise ValueError(f"{name} must have shape ({dim},), got {v.shape}")
    return v


def _component(client, sample_index, upper=False):
    data = client.upper_dataset if upper else client.dataset
    if not 0 <= sample_index < len(data):
        raise ValueError(f"sample_index {sample_index} out of range [0, {len(data)})")
    return data[sample_index]


def _hyperrep_parts(comp, x, y):
    p, q = comp.dims
    W = _vec(x, p, "x").reshape(q, comp.a.shape[0])
    y = _vec(y, q, "y")
    z = W @ comp.a
    return W, y, z, float(y @ z - comp.b)


def lower_grad_y_sample(client, x, y, sample_index):
    """Gradient in ``y`` of one lower-level sample loss."""
    comp = _component(client, sample_index)
    p, q = comp.dims
    if isinstance(comp, SampleComponent):
        return comp.A @ _vec(y, q, "y") + comp.B @ _vec(x, p, "x") + comp.c
    _, y, z, r = _hyperrep_parts(comp, x, y)
    return r * z + comp.rho * y


def lower_hvp_yy_sample(client, x, y, v, sample_index):
    """Lower-level Hessian (in ``y``) of one sample applied to ``v``."""
    comp = _component(client, sample_index)
    p, q = comp.dims
    v = _vec(v, q, "v")
    if isinstance(comp, SampleComponent):
        _vec(x, p, "x")
        _vec(y, q, "y")
        return comp.A @ v
    _, _, z, _ = _hyperrep_parts(comp, x, y)
    return z * (z @ v) + comp.rho * v


def lower_jvp_xy_sample(client, x, y, v, sample_index):
    """Mixed second derivative of one lower sample, as a map from y-space to x-space."""
    comp = _component(client, sample_index)
    p, q = comp.dims
    v = _vec(v, q, "v")
    if isinstance(comp, SampleComponent):
        _vec(x, p, "x")
        _vec(y, q, "y")
        return comp.B.T @ v
    _, y, z, r = _hyperrep_parts(comp, x, y)
    return np.outer((z @ v) * y + r * v, comp.a).ravel()


def upper_grad_sample(client, x, y, sample_index):
    """``(grad_x f, grad_y f)`` of one upper-level sample."""
    comp = _component(client, sample_index, upper=True)
    p, q = comp.dims
    if isinstance(comp, SampleComponent):
        _vec(x, p, "x")
        return np.zeros(p), comp.V @ (_vec(y, q, "y") - comp.u)
    _, y, z, r = _hyperrep_parts(comp, x, y)
    return np.outer(r * y, comp.a).ravel(), r * z


def _offsets(sizes):
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


def _client_weights(offsets):
    sizes = np.diff(offsets)
    m = len(sizes)
    return np.repeat(1.0 / (m * sizes), sizes)


class ProblemFamily:
    """Common interface and generic mean oracles.

    Subclasses provide the batched per-sample oracles; everything exact
    (means, ``y*``, hypergradient) is derived here from those oracles, with
    overrides where closed forms are cheaper.
    """

    kind = "abstract"

    def __init__(self, lower_offsets, upper_offsets, p, q, l_g1, mu_g, sigma_het=0.0,
                 params=None):
        self.lower_offsets = np.asarray(lower_offsets, dtype=np.int64)
        self.upper_offsets = np.asarray(upper_offsets, dtype=np.int64)
        self.m = len(self.lower_offsets) - 1
        self.p = int(p)
        self.q = int(q)
        self.l_g1 = float(l_g1)
        self.mu_g = float(mu_g)
        self.sigma_het = float(sigma_het)
        self.params = dict(params or {})
        if np.any(np.diff(self.lower_offsets) < 1) or np.any(np.diff(self.upper_offsets) < 1):
            raise ValueError("every client needs a non-empty dataset")
        if not 0 < self.mu_g <= self.l_g1:
            raise ValueError("need 0 < mu_g <= l_g1")
        self.lower_weights = _client_weights(self.lower_offsets)
        self.upper_weights = _client_weights(self.upper_offsets)
        self._clients = None

    @property
    def lower_sizes(self):
        return np.diff(self.lower_offsets)

    @property
    def upper_sizes(self):
        return np.diff(self.upper_offsets)

    @property
    def n_lower(self):
        return int(self.lower_offsets[-1])

    @property
    def n_upper(self):
        return int(self.upper_offsets[-1])

    @property
    def clients(self):
        if self._clients is None:
            self._clients = [self.client(i) for i in range(self.m)]
        return self._clients

    def check_x(self, x):
        return _vec(x, self.p, "x")

    def check_y(self, y):
        return _vec(y, self.q, "y")

    def default_x0(self):
        return np.zeros(self.p)

    # batched oracles, implemented by subclasses
    def lower_grad_y(self, x, y, idx):
        raise NotImplementedError

    def lower_grad_x(self, x, y, idx):
        raise NotImplementedError

    def lower_hvp_yy(self, x, y, v, idx):
        raise NotImplementedError

    def lower_jvp_xy(self, x, y, v, idx):
        raise NotImplementedError

    def upper_grad_x(self, x, y, idx):
        raise NotImplementedError

    def upper_grad_y(self, x, y, idx):
        raise NotImplementedError

    def lower_loss(self, x, y, idx):
        raise NotImplementedError

    def upper_loss(self, x, y, idx):
        raise NotImplementedError

    # exact means
    def _all_lower(self):
        return np.arange(self.n_lower)

    def _all_upper(self):
        return np.arange(self.n_upper)

    def mean_lower_grad_y(self, x, y):
        g = self.lower_grad_y(x, np.broadcast_to(y, (self.n_lower, self.q)), self._all_lower())
        return self.lower_weights @ g

    def mean_lower_grad_x(self, x, y):
        g = self.lower_grad_x(x, np.broadcast_to(y, (self.n_lower, self.q)), self._all_lower())
        return self.lower_weights @ g

    def mean_upper_grad(self, x, y):
        idx = self._all_upper()
        yb = np.broadcast_to(y, (self.n_upper, self.q))
        return (self.upper_weights @ self.upper_grad_x(x, yb, idx),
                self.upper_weights @ self.upper_grad_y(x, yb, idx))

    def _basis_products(self, fn, x, y, n, idx_all, weights, out_dim):
        out = np.zeros((out_dim, self.q))
        yb = np.broadcast_to(y, (n, self.q))
        for j in range(self.q):
            v = np.zeros((n, self.q))
            v[:, j] = 1.0
            out[:, j] = weights @ fn(x, yb, v, idx_all)
        return out

    def mean_lower_hessian_yy(self, x, y):
        return self._basis_products(self.lower_hvp_yy, x, y, self.n_lower, self._all_lower(),
                                    self.lower_weights, self.q)

    def mean_cross_xy(self, x, y):
        """Mean mixed derivative as a (p, q) matrix."""
        return self._basis_products(self.lower_jvp_xy, x, y, self.n_lower, self._all_lower(),
                                    self.lower_weights, self.p)

    def client_lower_grad_y(self, x, y):
        """(m, q) array of client-mean lower gradients."""
        g = self.lower_grad_y(x, np.broadcast_to(y, (self.n_lower, self.q)), self._all_lower())
        sizes = self.lower_sizes
        return np.add.reduceat(g, self.lower_offsets[:-1], axis=0) / sizes[:, None]

    def upper_value(self, x, y):
        idx = self._all_upper()
        return float(self.upper_weights @ self.upper_loss(x, np.broadcast_to(y, (self.n_upper, self.q)), idx))

    def lower_value(self, x, y):
        idx = self._all_lower()
        return float(self.lower_weights @ self.lower_loss(x, np.broadcast_to(y, (self.n_lower, self.q)), idx))

    def lower_solution(self, x):
        x = self.check_x(x)
        H = self.mean_lower_hessian_yy(x, np.zeros(self.q))
        g0 = self.mean_lower_grad_y(x, np.zeros(self.q))
        return -np.linalg.solve(H, g0)

    def surrogate_gradient(self, x, y):
        x = self.check_x(x)
        y = self.check_y(y)
        gx, gy = self.mean_upper_grad(x, y)
        H = self.mean_lower_hessian_yy(x, y)
        return gx - self.mean_cross_xy(x, y) @ np.linalg.solve(H, gy)

    def hypergradient(self, x):
        return self.surrogate_gradient(x, self.lower_solution(x))

    def phi(self, x):
        return self.upper_value(x, self.lower_solution(x))

    # serialization hooks
    def to_arrays(self):
        raise NotImplementedError

    def meta(self):
        return {
            "kind": self.kind, "m": self.m, "p": self.p, "q": self.q,
            "l_g1": self.l_g1, "mu_g": self.mu_g, "sigma_het": self.sigma_het,
            "params": self.params,
        }


class QuadraticFamily(ProblemFamily):
    """Stacked quadratic samples; see module docstring for the losses."""

    kind = "quadratic"

    def __init__(self, A, B, c, u, V, offsets, l_g1=None, mu_g=None, sigma_het=0.0,
                 params=None):
        self.A = np.ascontiguousarray(A, dtype=np.float64)
        self.B = np.ascontiguousarray(B, dtype=np.float64)
        self.c = np.ascontiguousarray(c, dtype=np.float64)
        self.u = np.ascontiguousarray(u, dtype=np.float64)
        self.V = np.ascontiguousarray(V, dtype=np.float64)
        L, q, _ = self.A.shape
        p = self.B.shape[2]
        if (self.B.shape != (L, q, p) or self.c.shape != (L, q) or self.u.shape != (L, q)
                or self.V.shape != (L, q, q) or self.A.shape != (L, q, q)):
            raise ValueError("inconsistent quadratic component shapes")
        offsets = np.asarray(offsets, dtype=np.int64)
        if offsets[-1] != L:
            raise ValueError("offsets do not cover the stacked samples")
        if not np.allclose(self.A, np.swapaxes(self.A, 1, 2), atol=1e-12):
            raise ValueError("lower Hessians A must be symmetric")
        eig = np.linalg.eigvalsh(self.A)
        if l_g1 is None:
            l_g1 = float(eig.max())
        if mu_g is None:
            mu_g = float(eig.min())
        super().__init__(offsets, offsets, p, q, l_g1, mu_g, sigma_het, params)
        w = self.lower_weights
        self.A_mean = np.einsum("s,sij->ij", w, self.A)
        self.B_mean = np.einsum("s,sij->ij", w, self.B)
        self.c_mean = w @ self.c
        self.V_mean = np.einsum("s,sij->ij", w, self.V)
        self.Vu_mean = w @ np.einsum("sij,sj->si", self.V, self.u)
        self._chol = sla.cho_factor(self.A_mean)

    @classmethod
    def from_clients(cls, clients, l_g1=None, mu_g=None, sigma_het=0.0, params=None):
        comps = [comp for cl in clients for comp in cl.dataset]
        offsets = _offsets([len(cl.dataset) for cl in clients])
        q = np.atleast_2d(np.asarray(comps[0].A, dtype=float)).shape[0]
        p = np.asarray(comps[0].B, dtype=float).size // q

        def stack(name, shape):
            return np.stack([np.asarray(getattr(s, name), dtype=float).reshape(shape) for s in comps])

        return cls(stack("A", (q, q)), stack("B", (q, p)), stack("c", (q,)), stack("u", (q,)),
                   stack("V", (q, q)), offsets, l_g1=l_g1, mu_g=mu_g, sigma_het=sigma_het,
                   params=params)

    @classmethod
    def scalar(cls, A=2.0, B=1.0, c=0.0, V=1.0, u=0.0, l_g1=None):
        """One client, one sample, all dimensions 1."""
        return cls([[[A]]], [[[B]]], [[c]], [[u]], [[[V]]], [0, 1], l_g1=l_g1)

    def client(self, i):
        lo, hi = self.lower_offsets[i], self.lower_offsets[i + 1]
        comps = [SampleComponent(self.A[s], self.B[s], self.c[s], self.u[s], self.V[s])
                 for s in range(lo, hi)]
        return ClientProblem(i, comps)

    def lower_grad_y(self, x, y, idx):
        return (np.einsum("sij,sj->si", self.A[idx], y) + self.B[idx] @ x + self.c[idx])

    def lower_grad_x(self, x, y, idx):
        return np.einsum("sji,sj->si", self.B[idx], y)

    def lower_hvp_yy(self, x, y, v, idx):
        return np.einsum("sij,sj->si", self.A[idx], v)

    def lower_jvp_xy(self, x, y, v, idx):
        return np.einsum("sji,sj->si", self.B[idx], v)

    def upper_grad_x(self, x, y, idx):
        return np.zeros((len(idx), self.p))

    def upper_grad_y(self, x, y, idx):
        return np.einsum("sij,sj->si", self.V[idx], y - self.u[idx])

    def lower_loss(self, x, y, idx):
        Ay = np.einsum("sij,sj->si", self.A[idx], y)
        return 0.5 * np.sum(y * Ay, axis=1) + np.sum((self.B[idx] @ x + self.c[idx]) * y, axis=1)

    def upper_loss(self, x, y, idx):
        d = y - self.u[idx]
        return 0.5 * np.sum(d * np.einsum("sij,sj->si", self.V[idx], d), axis=1)

    def mean_lower_grad_y(self, x, y):
        return self.A_mean @ y + self.B_mean @ x + self.c_mean

    def mean_lower_grad_x(self, x, y):
        return self.B_mean.T @ y

    def mean_upper_grad(self, x, y):
        return np.zeros(self.p), self.V_mean @ y - self.Vu_mean

    def mean_lower_hessian_yy(self, x, y):
        return self.A_mean

    def mean_cross_xy(self, x, y):
        return self.B_mean.T

    def lower_solution(self, x):
        x = self.check_x(x)
        return -sla.cho_solve(self._chol, self.B_mean @ x + self.c_mean)

    def surrogate_gradient(self, x, y):
        self.check_x(x)
        y = self.check_y(y)
        return -self.B_mean.T @ sla.cho_solve(self._chol, self.V_mean @ y - self.Vu_mean)

    def minimizer(self):
        """A global minimizer of the hypergradient norm (least-squares root of the affine map)."""
        Y = -sla.cho_solve(self._chol, self.B_mean)
        G = -self.B_mean.T @ sla.cho_solve(self._chol, self.V_mean @ Y)
        g0 = self.hypergradient(np.zeros(self.p))
        return np.linalg.lstsq(G, -g0, rcond=None)[0]

    def to_arrays(self):
        return {"A": self.A, "B": self.B, "c": self.c, "u": self.u, "V": self.V,
                "lower_offsets": self.lower_offsets}


class HyperRepFamily(ProblemFamily):
    """Linear representation ``W`` (outer) with a ridge head ``omega`` (inner)."""

    kind = "hyperrep"

    def __init__(self, a_train, b_train, train_offsets, a_val, b_val, val_offsets, d_rep,
                 rho, x_init=None, w_radius=None, sigma_het=0.0, params=None):
        self.a_train = np.ascontiguousarray(a_train, dtype=np.float64)
        self.b_train = np.ascontiguousarray(b_train, dtype=np.float64)
        self.a_val = np.ascontiguousarray(a_val, dtype=np.float64)
        self.b_val = np.ascontiguousarray(b_val, dtype=np.float64)
        self.d_in = self.a_train.shape[1]
        self.d_rep = int(d_rep)
        self.rho = float(rho)
        if self.rho <= 0:
            raise ValueError("ridge rho must be positive")
        if self.d_rep < 1 or self.d_in < 1:
            raise ValueError("d_in and d_rep must be positive")
        if x_init is None:
            x_init = np.zeros(self.d_rep * self.d_in)
        self.x_init = np.asarray(x_init, dtype=np.float64).ravel()
        if w_radius is None:
            w_radius = max(2.0 * np.linalg.norm(self.x_init.reshape(self.d_rep, self.d_in), 2), 1.0)
        self.w_radius = float(w_radius)
        amax = max(np.max(np.sum(self.a_train ** 2, axis=1)), np.max(np.sum(self.a_val ** 2, axis=1)))
        l_g1 = self.rho + amax * self.w_radius ** 2
        super().__init__(train_offsets, val_offsets, self.d_rep * self.d_in, self.d_rep, l_g1,
                         self.rho, sigma_het, params)

    def default_x0(self):
        return self.x_init.copy()

    def client(self, i):
        tl, th = self.lower_offsets[i], self.lower_offsets[i + 1]
        vl, vh = self.upper_offsets[i], self.upper_offsets[i + 1]
        mk = lambda a, b: HyperRepComponent(a, float(b), self.rho, self.d_rep)
        return ClientProblem(i, [mk(self.a_train[s], self.b_train[s]) for s in range(tl, th)],
                             [mk(self.a_val[s], self.b_val[s]) for s in range(vl, vh)])

    def _W(self, x):
        return np.asarray(x, dtype=np.float64).reshape(self.d_rep, self.d_in)

    def _zr(self, x, y, a, b):
        z = a @ self._W(x).T
        return z, np.sum(y * z, axis=1) - b

    def lower_grad_y(self, x, y, idx):
        z, r = self._zr(x, y, self.a_train[idx], self.b_train[idx])
        return r[:, None] * z + self.rho * y

    def lower_grad_x(self, x, y, idx):
        a = self.a_train[idx]
        _, r = self._zr(x, y, a, self.b_train[idx])
        return np.einsum("si,sj->sij", r[:, None] * y, a).reshape(len(idx), -1)

    def lower_hvp_yy(self, x, y, v, idx):
        z = self.a_train[idx] @ self._W(x).T
        return z * np.sum(z * v, axis=1)[:, None] + self.rho * v

    def lower_jvp_xy(self, x, y, v, idx):
        a = self.a_train[idx]
        z, r = self._zr(x, y, a, self.b_train[idx])
        left = np.sum(z * v, axis=1)[:, None] * y + r[:, None] * v
        return np.einsum("si,sj->sij", left, a).reshape(len(idx), -1)

    def upper_grad_x(self, x, y, idx):
        a = self.a_val[idx]
        _, r = self._zr(x, y, a, self.b_val[idx])
        return np.einsum("si,sj->sij", r[:, None] * y, a).reshape(len(idx), -1)

    def upper_grad_y(self, x, y, idx):
        z, r = self._zr(x, y, self.a_val[idx], self.b_val[idx])
        return r[:, None] * z

    def lower_loss(self, x, y, idx):
        _, r = self._zr(x, y, self.a_train[idx], self.b_train[idx])
        return 0.5 * r ** 2 + 0.5 * self.rho * np.sum(y * y, axis=1)

    def upper_loss(self, x, y, idx):
        _, r = self._zr(x, y, self.a_val[idx], self.b_val[idx])
        return 0.5 * r ** 2

    def mean_lower_hessian_yy(self, x, y):
        z = self.a_train @ self._W(x).T
        return np.einsum("s,si,sj->ij", self.lower_weights, z, z) + self.rho * np.eye(self.q)

    def to_arrays(self):
        return {"a_train": self.a_train, "b_train": self.b_train,
                "lower_offsets": self.lower_offsets, "a_val": self.a_val,
                "b_val": self.b_val, "upper_offsets": self.upper_offsets,
                "x_init": self.x_init}

    def meta(self):
        out = super().meta()
        out.update(d_rep=self.d_rep, d_in=self.d_in, rho=self.rho, w_radius=self.w_radius)
        return out


def exact_lower_solution(family, x):
    """``y*(x)`` by a direct solve of the mean lower-level optimality system."""
    return family.lower_solution(x)


def exact_hypergradient(family, x):
    """Implicit hypergradient of ``Phi(x) = f(x, y*(x))`` from exact means."""
    return family.hypergradient(x)


def phi_value(family, x):
    return family.phi(x)


def _centered(arr, axis=0):
    return arr - arr.mean(axis=axis, keepdims=True)


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _clip_spectrum(A, lo, hi):
    w, Q = np.linalg.eigh(A)
    w = np.clip(w, lo, hi)
    return _sym(np.einsum("...ij,...j,...kj->...ik", Q, w, Q))


def _orthogonal(rng, q):
    Q, R = np.linalg.qr(rng.standard_normal((q, q)))
    return Q * np.sign(np.diag(R))


def _scale_to(arr, target):
    """Rescale a stack of symmetric perturbations so the largest spectral norm is ``target``."""
    if arr.size == 0:
        return arr
    norms = np.abs(np.linalg.eigvalsh(arr)).max(axis=-1)
    top = norms.max()
    if top <= 1e-300 or target == 0:
        return np.zeros_like(arr)
    return arr * (target / top)


def generate_quadratic_family(m, p, q, samples_per_client, mu_g, l_g1, sigma_het, seed, *,
                              noise=0.5, hess_het=0.5, hess_margin=0.25, hess_noise=None,
                              v_scale=1.0, cross_scale=1.0, upper_het=1.0):
    """Synthetic heterogeneous quadratic family.

    The global (client-averaged) problem does not depend on ``sigma_het``:
    client offsets of ``B``, ``c``, ``u`` and of the Hessians are centred
    across clients, and within-client sample noise is centred per client, so
    families generated from one seed at different heterogeneity levels share
    the same ``Phi`` and differ only in how the objective is spread across
    clients.  With ``sigma_het = 0`` every client has the same mean problem;
    with one sample per client there is no within-client noise at all.

    Per-sample Hessian spectra are confined to ``[mu_g, l_g1]``: base
    eigenvalues lie in ``[mu_g + d, l_g1 - d]`` with ``d = hess_margin *
    (l_g1 - mu_g)`` and the client and sample perturbations each have
    spectral norm at most ``d / 2``.  A final eigenvalue clip guards rounding.

    ``upper_het`` scales the client offsets of the cross term ``B`` and the
    upper target ``u`` relative to ``sigma_het``; ``upper_het = 0`` confines
    heterogeneity to the lower-level Hessians and linear terms.
    """
    if not 0 < mu_g <= l_g1:
        raise ValueError("need 0 < mu_g <= l_g1")
    if sigma_het < 0:
        raise ValueError("sigma_het must be non-negative")
    if min(m, p, q, samples_per_client) < 1:
        raise ValueError("m, p, q and samples_per_client must be positive")
    if not 0 <= hess_margin <= 0.5:
        raise ValueError("hess_margin must lie in [0, 0.5]")
    if upper_het < 0:
        raise ValueError("upper_het must be non-negative")
    if hess_noise is None:
        hess_noise = noise
    rng = np.random.default_rng(derive_seed(seed, Tag.FAMILY))
    S = samples_per_client
    L = m * S
    band = l_g1 - mu_g
    d = hess_margin * band

    Q = _orthogonal(rng, q)
    base_eig = np.sort(rng.uniform(mu_g + d, l_g1 - d, size=q))
    A0 = _sym((Q * base_eig) @ Q.T)
    E_client = _sym(rng.standard_normal((m, q, q)))
    E_client = _scale_to(_centered(E_client) if m > 1 else np.zeros_like(E_client),
                         min(sigma_het * hess_het, 1.0) * d / 2)
    E_sample = _sym(rng.standard_normal((m, S, q, q)))
    E_sample = _centered(E_sample, axis=1).reshape(L, q, q) if S > 1 else np.zeros((L, q, q))
    E_sample = _scale_to(E_sample, min(hess_noise, 1.0) * d / 2)
    A = A0[None] + np.repeat(E_client, S, axis=0) + E_sample
    A = _clip_spectrum(A, mu_g, l_g1)

    def affine(shape, scale, het=1.0):
        base = scale * rng.standard_normal(shape)
        off = rng.standard_normal((m,) + shape)
        off = het * sigma_het * _centered(off) if m > 1 else np.zeros_like(off)
        smp = rng.standard_normal((m, S) + shape)
        smp = noise * _centered(smp, axis=1) if S > 1 else np.zeros_like(smp)
        return (base[None, None] + off[:, None] + smp).reshape((L,) + shape)

    B = affine((q, p), cross_scale / np.sqrt(p), upper_het)
    c = affine((q,), 1.0)
    u = affine((q,), 1.0, upper_het)

    Qv = _orthogonal(rng, q)
    v_eig = v_scale * rng.uniform(0.5, 1.5, size=q)
    V0 = _sym((Qv * v_eig) @ Qv.T)
    V_noise = _sym(rng.standard_normal((m, S, q, q)))
    V_noise = _centered(V_noise, axis=1).reshape(L, q, q) if S > 1 else np.zeros((L, q, q))
    V = V0[None] + _scale_to(V_noise, min(noise, 1.0) * v_eig.min() / 2)

    params = dict(generator="quadratic", m=m, p=p, q=q, samples_per_client=S, mu_g=mu_g,
                  l_g1=l_g1, sigma_het=sigma_het, seed=int(seed), noise=noise,
                  hess_het=hess_het, hess_margin=hess_margin, hess_noise=hess_noise,
                  v_scale=v_scale, cross_scale=cross_scale, upper_het=upper_het)
    return QuadraticFamily(A, B, c, u, V, _offsets([S] * m), l_g1=l_g1, mu_g=mu_g,
                           sigma_het=sigma_het, params=params)


def generate_hyperrep_family(m, d_in, d_rep, samples_per_client, rho, sigma_het, seed, *,
                             noise=0.1, val_fraction=0.5, w_radius=None):
    """Per-client linear regression data around client-specific heads.

    A shared ground-truth representation ``W_true`` maps inputs to features;
    client ``i`` labels its data with head ``omega_0 + sigma_het * delta_i``
    (offsets centred across clients) plus Gaussian label noise.  Each client's
    samples are split into a training part (lower level) and a validation
    part (upper level).  The starting representation ``x_init`` is a random
    perturbation of ``W_true``.
    """
    if rho <= 0:
        raise ValueError("ridge rho must be positive")
    if min(m, d_in, d_rep) < 1 or samples_per_client < 2:
        raise ValueError("invalid dimensions (need samples_per_client >= 2)")
    if sigma_het < 0:
        raise ValueError("sigma_het must be non-negative")
    rng = np.random.default_rng(derive_seed(seed, Tag.FAMILY))
    W_true = rng.standard_normal((d_rep, d_in)) / np.sqrt(d_rep)
    head0 = rng.standard_normal(d_rep)
    delta = rng.standard_normal((m, d_rep))
    delta = _centered(delta) if m > 1 else np.zeros_like(delta)
    heads = head0[None] + sigma_het * delta
    n_val = min(max(1, int(round(val_fraction * samples_per_client))), samples_per_client - 1)
    n_tr = samples_per_client - n_val
    a = rng.standard_normal((m, samples_per_client, d_in)) / np.sqrt(d_in)
    eps = rng.standard_normal((m, samples_per_client))
    b = np.einsum("mi,ij,msj->ms", heads, W_true, a) + noise * eps
    x_init = (W_true + 0.5 * rng.standard_normal((d_rep, d_in)) / np.sqrt(d_rep)).ravel()
    params = dict(generator="hyperrep", m=m, d_in=d_in, d_rep=d_rep,
                  samples_per_client=samples_per_client, rho=rho, sigma_het=sigma_het,
                  seed=int(seed), noise=noise, val_fraction=val_fraction)
    fam = HyperRepFamily(a[:, :n_tr].reshape(-1, d_in), b[:, :n_tr].ravel(), _offsets([n_tr] * m),
                         a[:, n_tr:].reshape(-1, d_in), b[:, n_tr:].ravel(), _offsets([n_val] * m),
                         d_rep, rho, x_init=x_init, w_radius=w_radius, sigma_het=sigma_het,
                         params=params)
    fam.W_true = W_true
    fam.heads = heads
    return fam


def save_family(family, path):
    """Write a self-describing ``.npz`` snapshot (arrays plus JSON metadata)."""
    arrays = dict(family.to_arrays())
    arrays["meta"] = np.frombuffer(json.dumps(family.meta(), sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_family(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        arr = {k: data[k] for k in data.files if k != "meta"}
    if meta["kind"] == "quadratic":
        return QuadraticFamily(arr["A"], arr["B"], arr["c"], arr["u"], arr["V"],
                               arr["lower_offsets"], l_g1=meta["l_g1"], mu_g=meta["mu_g"],
                               sigma_het=meta["sigma_het"], params=meta["params"])
    if meta["kind"] == "hyperrep":
        return HyperRepFamily(arr["a_train"], arr["b_train"], arr["lower_offsets"], arr["a_val"],
                              arr["b_val"], arr["upper_offsets"], meta["d_rep"], meta["rho"],
                              x_init=arr["x_init"], w_radius=meta["w_radius"],
                              sigma_het=meta["sigma_het"], params=meta["params"])
    raise ValueError(f"unknown family kind {meta['kind']!r}")


def family_fingerprint(family):
    """Short content hash used in record headers."""
    h = hashlib.sha256(json.dumps(family.meta(), sort_keys=True).encode())
    for key, arr in sorted(family.to_arrays().items()):
        h.update(key.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]
