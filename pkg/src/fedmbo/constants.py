"""Smoothness constants of a family and the derived step-size schedule.

``measure_family_constants`` returns the problem-level constants (Lipschitz
moduli, strong convexity, variance bounds).  ``derive_constants`` turns them
into the analysis constants (``L_y``, ``M_f``, ``L_f``, ``L_yx``, variance and
second-moment bounds of the hypergradient estimator, the Neumann bias bound
and the step-size caps), and ``step_schedule`` emits the outer/inner step
sizes.  The condition number is ``kappa_g = l_g1 / mu_g``.
"""

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .problems import HyperRepFamily, QuadraticFamily
from .sampling import Tag, derive_seed


@dataclass(frozen=True)
class BaseConstants:
    """Measured problem constants.  ``region`` is the box radius ``R``."""

    l_f0: float
    l_f1: float
    l_g1: float
    l_g2: float
    mu_g: float
    sigma_f2: float
    sigma_g1_2: float
    sigma_g2_2: float
    sigma_g_2: float
    region: float = 10.0
    exact: bool = True

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, float) and not np.isfinite(val):
                raise ValueError(f"constant {f.name} is not finite")


@dataclass(frozen=True)
class ConstantSet:
    base: BaseConstants
    N: int
    T: int
    kappa_g: float
    L_y: float
    M_f: float
    L_f: float
    L_yx: float
    eta: float
    sigma_tilde_f2: float
    D_tilde_f2: float
    bias_stated: float
    bias_proof: float
    alpha_hat1: float
    beta_bar: float
    alpha_hat2: float

    def to_dict(self):
        out = asdict(self)
        out["base"] = asdict(self.base)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["base"] = BaseConstants(**data["base"])
        return cls(**data)


def _spec_norm(M):
    """Spectral norm of a stack of matrices (last two axes)."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 2:
        return float(np.linalg.norm(M, 2))
    return np.linalg.norm(M, 2, axis=(-2, -1))


def _box_probes(family, R, probe_count, seed, center_x=None, center_y=None):
    rng = np.random.default_rng(derive_seed(seed, Tag.PROBE))
    cx = np.zeros(family.p) if center_x is None else center_x
    cy = np.zeros(family.q) if center_y is None else center_y
    probes = [(cx.copy(), cy.copy())]
    for _ in range(probe_count):
        probes.append((cx + rng.uniform(-R, R, family.p), cy + rng.uniform(-R, R, family.q)))
    return probes


def _client_variance(values, offsets):
    """Max over clients of mean squared deviation from the client mean; values (L, d)."""
    best = 0.0
    for c in range(len(offsets) - 1):
        block = values[offsets[c]:offsets[c + 1]]
        dev = block - block.mean(axis=0)
        best = max(best, float(np.mean(np.sum(dev * dev, axis=1))))
    return best


def _heterogeneity(values, offsets):
    """Max over clients of the squared distance of client mean to global mean."""
    sizes = np.diff(offsets)
    means = np.add.reduceat(values, offsets[:-1], axis=0) / sizes[:, None]
    dev = means - means.mean(axis=0)
    return float(np.max(np.sum(dev * dev, axis=1)))


def _joint_lower_hessian(family, x, y, idx):
    """Per-sample Hessian of the lower loss in ``z = (x, y)``; shape (L, p+q, p+q)."""
    p, q = family.p, family.q
    if isinstance(family, QuadraticFamily):
        H = np.zeros((len(idx), p + q, p + q))
        H[:, p:, :p] = family.B[idx]
        H[:, :p, p:] = np.swapaxes(family.B[idx], 1, 2)
        H[:, p:, p:] = family.A[idx]
        return H
    return _hyperrep_joint_hessian(family, x, y, family.a_train[idx], family.b_train[idx],
                                   family.rho)


def _hyperrep_joint_hessian(family, x, y, a, b, rho):
    d_rep, d_in = family.d_rep, family.d_in
    p, q = family.p, family.q
    W = np.asarray(x).reshape(d_rep, d_in)
    z = a @ W.T
    r = z @ y - b
    L = len(b)
    J = np.concatenate([np.einsum("i,sj->sij", y, a).reshape(L, p), z], axis=1)
    H = np.einsum("si,sj->sij", J, J)
    # d^2 r / dW_ij d omega_k = delta_ik a_j
    K = np.zeros((L, p, q))
    for i in range(d_rep):
        K[:, i * d_in:(i + 1) * d_in, i] = a
    H[:, :p, p:] += r[:, None, None] * K
    H[:, p:, :p] += r[:, None, None] * np.swapaxes(K, 1, 2)
    H[:, p:, p:] += rho * np.eye(q)
    return H


def _lower_grad_z(family, x, y, idx):
    yb = np.broadcast_to(y, (len(idx), family.q))
    return np.concatenate([family.lower_grad_x(x, yb, idx), family.lower_grad_y(x, yb, idx)], axis=1)


def _upper_grad_z(family, x, y, idx):
    yb = np.broadcast_to(y, (len(idx), family.q))
    return np.concatenate([family.upper_grad_x(x, yb, idx), family.upper_grad_y(x, yb, idx)], axis=1)


def measure_family_constants(family, R=10.0, probe_count=8, seed=0, probes=None):
    """Measure the problem constants of ``family`` on the box of radius ``R``.

    Quadratic families get exact Lipschitz moduli from the stored matrices
    (``l_g1`` is the largest per-sample norm of the joint Hessian in
    ``(x, y)``, never below the family's declared Neumann scale; ``mu_g`` the
    smallest eigenvalue over client-mean Hessians; ``l_g2 = 0``).  Variance
    terms are exact finite-sum variances maximised over clients and probe
    points: the box centre, ``probe_count`` uniform points in the box and any
    user-supplied ``(x, y)`` probes.

    The representation family is not globally smooth, so its constants are
    maxima over probes in a box of radius ``R`` around ``(x_init,
    y*(x_init))`` and are estimates rather than certified bounds.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be at least 1")
    if R <= 0:
        raise ValueError("region radius R must be positive")
    lo, up = family.lower_offsets, family.upper_offsets
    all_lo = np.arange(family.n_lower)
    all_up = np.arange(family.n_upper)
    if isinstance(family, HyperRepFamily):
        cx = family.default_x0()
        pts = _box_probes(family, R, probe_count, seed, cx, family.lower_solution(cx))
    else:
        pts = _box_probes(family, R, probe_count, seed)
    if probes:
        pts += [(family.check_x(px), family.check_y(py)) for px, py in probes]

    sigma_f2 = sigma_g1 = sigma_g = 0.0
    for x, y in pts:
        gz = _lower_grad_z(family, x, y, all_lo)
        fz = _upper_grad_z(family, x, y, all_up)
        sigma_g1 = max(sigma_g1, _client_variance(gz, lo))
        sigma_f2 = max(sigma_f2, _client_variance(fz, up))
        sigma_g = max(sigma_g, _heterogeneity(gz, lo))

    if isinstance(family, QuadraticFamily):
        H = _joint_lower_hessian(family, None, None, all_lo)
        l_g1 = max(float(np.max(_spec_norm(H))), family.l_g1)
        sigma_g2 = 0.0
        for c in range(family.m):
            block = H[lo[c]:lo[c + 1]]
            sigma_g2 = max(sigma_g2, float(np.mean(_spec_norm(block - block.mean(axis=0)) ** 2)))
        client_A = np.add.reduceat(family.A, lo[:-1], axis=0) / family.lower_sizes[:, None, None]
        mu_g = float(np.min(np.linalg.eigvalsh(client_A)))
        Vn = _spec_norm(family.V)
        l_f1 = float(np.max(Vn))
        Vu = np.linalg.norm(np.einsum("sij,sj->si", family.V, family.u), axis=1)
        l_f0 = float(np.max(Vn * R * np.sqrt(family.q) + Vu))
        return BaseConstants(l_f0=l_f0, l_f1=l_f1, l_g1=l_g1, l_g2=0.0, mu_g=mu_g,
                             sigma_f2=sigma_f2, sigma_g1_2=sigma_g1, sigma_g2_2=sigma_g2,
                             sigma_g_2=sigma_g, region=float(R), exact=True)

    rng = np.random.default_rng(derive_seed(seed, Tag.PROBE, 1))
    l_g1 = family.l_g1
    l_g2 = l_f0 = l_f1 = sigma_g2 = 0.0
    for x, y in pts:
        H = _joint_lower_hessian(family, x, y, all_lo)
        l_g1 = max(l_g1, float(np.max(_spec_norm(H))))
        for c in range(family.m):
            block = H[lo[c]:lo[c + 1]]
            sigma_g2 = max(sigma_g2, float(np.mean(_spec_norm(block - block.mean(axis=0)) ** 2)))
        step = rng.standard_normal(family.p + family.q)
        step *= 1e-4 * max(1.0, R) / np.linalg.norm(step)
        H2 = _joint_lower_hessian(family, x + step[:family.p], y + step[family.p:], all_lo)
        l_g2 = max(l_g2, float(np.max(_spec_norm(H2 - H)) / np.linalg.norm(step)))
        Hf = _hyperrep_joint_hessian(family, x, y, family.a_val, family.b_val, 0.0)
        l_f1 = max(l_f1, float(np.max(_spec_norm(Hf))))
        l_f0 = max(l_f0, float(np.max(np.linalg.norm(_upper_grad_z(family, x, y, all_up), axis=1))))
    return BaseConstants(l_f0=l_f0, l_f1=l_f1, l_g1=l_g1, l_g2=l_g2, mu_g=family.mu_g,
                         sigma_f2=sigma_f2, sigma_g1_2=sigma_g1, sigma_g2_2=sigma_g2,
                         sigma_g_2=sigma_g, region=float(R), exact=False)


def bias_bound_proof(l_f0, l_g1, mu_g, N):
    """Neumann truncation bias bound ``(l_f0 l_g1 / mu_g) (1 - mu_g / l_g1)^N``."""
    return l_f0 * l_g1 / mu_g * (1.0 - mu_g / l_g1) ** N


def bias_bound_stated(l_f1, l_g1, mu_g, N):
    """Headline form ``kappa_g l_f1 ((kappa_g - 1) / kappa_g)^N``."""
    kappa = l_g1 / mu_g
    return kappa * l_f1 * ((kappa - 1.0) / kappa) ** N


def derive_constants(base, N, T=1, eta=None):
    """Analysis constants from measured ones (pure function of its inputs).

    ``T`` only enters the inner step cap ``alpha_hat2``.  ``eta`` defaults
    to ``M_f / L_y``.
    """
    if base.mu_g <= 0:
        raise ValueError("mu_g must be positive")
    if N < 1 or T < 1:
        raise ValueError("N and T must be at least 1")
    lf0, lf1, lg1, lg2, mu = base.l_f0, base.l_f1, base.l_g1, base.l_g2, base.mu_g
    kappa = lg1 / mu
    L_y = lg1 / mu
    M_f = lf1 + lg1 * lf1 / mu + lf0 / mu * (lg2 + lg1 * lg2 / mu)
    L_f = lf1 + lg1 * (lf1 + M_f) / mu + lf0 / mu * (lg2 + lg1 * lg2 / mu)
    L_yx = (lg2 + lg2 * L_y) / mu + lg1 / mu ** 2 * (lg2 + lg2 * L_y)
    if eta is None:
        eta = M_f / L_y
    if eta <= 0:
        raise ValueError("eta must be positive")
    sf2 = base.sigma_f2
    s_tilde = sf2 + 3.0 / mu ** 2 * ((sf2 + lf0 ** 2) * (base.sigma_g2_2 + 2 * lg1 ** 2) + sf2 * lg1 ** 2)
    D_tilde = (lf0 + lf0 * lg1 / mu + lf1 * lg1 / mu) ** 2 + s_tilde
    alpha_hat1 = 1.0 / (2 * L_f + 4 * M_f * L_y + 2 * M_f * L_yx / (L_y * eta))
    beta_bar = 5 * M_f * L_y / mu + eta * L_yx * D_tilde * alpha_hat1 / (2 * mu)
    alpha_hat2 = T / (2 * lg1 * beta_bar)
    return ConstantSet(base=base, N=int(N), T=int(T), kappa_g=kappa, L_y=L_y, M_f=M_f, L_f=L_f,
                       L_yx=L_yx, eta=float(eta), sigma_tilde_f2=s_tilde, D_tilde_f2=D_tilde,
                       bias_stated=bias_bound_stated(lf1, lg1, mu, N),
                       bias_proof=bias_bound_proof(lf0, lg1, mu, N),
                       alpha_hat1=alpha_hat1, beta_bar=beta_bar, alpha_hat2=alpha_hat2)


def default_alpha_hat3(constants):
    return constants.kappa_g ** -2.5


def step_schedule(constants, K, n, T, alpha_hat3=None):
    """Outer steps ``alpha_k`` and inner steps ``beta_k`` for ``k < K``."""
    if min(K, n, T) < 1:
        raise ValueError("K, n and T must be at least 1")
    if alpha_hat3 is None:
        alpha_hat3 = default_alpha_hat3(constants)
    if alpha_hat3 <= 0:
        raise ValueError("alpha_hat3 must be positive")
    cs = constants if constants.T == T else replace(
        constants, T=int(T), alpha_hat2=T / (2 * constants.base.l_g1 * constants.beta_bar))
    alpha = min(cs.alpha_hat1, cs.alpha_hat2, np.sqrt(n / K) * alpha_hat3)
    beta = cs.beta_bar * alpha / T
    assert alpha <= cs.alpha_hat1
    assert beta <= 1.0 / (2 * cs.base.l_g1) * (1 + 1e-12), "schedule violates beta <= 1/(2*l_g1)"
    return np.full(K, alpha), np.full(K, beta)
