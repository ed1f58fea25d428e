"""Frozen constants and log-density evaluators of the conditional laws.

One DensitySpec pins everything needed to sample a statistic's law
conditional on the selection event: the Gaussian factor of the statistic,
the reconstruction map back to the randomization vector, the Jacobian of
that reparametrization, and the sign/box constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import NegativeVariance
from .iv_core import (as_grams, ar_statistic, tsls_estimate, tsls_statistic,
                      _diff_quantities)
from .sisvive import SelectionResult, omega_log_density

KINDS = ("tsls_stat", "tsls_est", "ar_intermediate")

# relative eigenvalue cutoffs for the rank-reduced AR covariance
_RANK_KEEP = 1e-10
_RANK_DROP = 1e-8


@dataclass(frozen=True)
class DensitySpec:
    """Samplable conditional law of one statistic given one selection event.

    The reconstruction map is omega(t, coef, u) = k1 @ t + k2 @ (alpha; beta)
    + lam (u; 0) - k3, with the statistic's Gaussian factor carried in
    diagonal sampling coordinates (mu_t, var_t). For the AR intermediary the
    sampling coordinates are the positive-eigenvalue directions of the
    rank-reduced covariance and ``basis`` maps them back.
    """

    kind: str
    beta0: float
    E: tuple
    signs: np.ndarray
    lam: float
    epsilon: float
    family: str
    omega_scale: np.ndarray
    mu_t: np.ndarray
    var_t: np.ndarray
    sigma_st: np.ndarray
    k1: np.ndarray
    k2: np.ndarray
    k3: np.ndarray
    s_obs: np.ndarray
    log_jacobian: float
    t_obs: np.ndarray
    sigma11: float
    basis: np.ndarray | None
    init_beta: float
    init_alpha: np.ndarray
    init_u: np.ndarray
    k2_active: np.ndarray = field(repr=False)
    inactive: np.ndarray = field(repr=False)
    const: np.ndarray = field(repr=False)
    joint_transform: np.ndarray = field(repr=False)
    cond_sd: np.ndarray = field(repr=False)   # per-coordinate sd of (t, coef)

    @property
    def t_dim(self) -> int:
        return self.mu_t.shape[0]

    @property
    def n_inactive(self) -> int:
        return self.inactive.shape[0]

    def initial_values(self):
        """Observed statistic and selection solution; lies in the box."""
        return (self.t_obs.copy(), self.init_beta,
                self.init_alpha.copy(), self.init_u.copy())


def build_density(data, sel: SelectionResult, beta0: float, kind: str) -> DensitySpec:
    """Assemble the conditional-law constants for one statistic and null value."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    grams = as_grams(data)
    big_l = grams.L
    E = sel.E
    k = len(E)
    sub = grams.subset(E)
    d_vec = grams.ztd - sub.zped          # Z'(P_Z - P_ZE) D
    s_obs = np.concatenate([grams.zty, [grams.dpy]])

    if kind == "tsls_stat":
        _, dpd_diff, _ = _diff_quantities(grams, E)
        s11 = grams.sigma_hat(beta0)[0, 0]
        if s11 <= 0:
            raise NegativeVariance(f"sigma11 estimate {s11:.3g} at beta0={beta0}")
        sst = np.sqrt(s11 / dpd_diff) * np.concatenate([d_vec, [dpd_diff]])
        k1 = -sst[:, None]
        mu_t = np.zeros(1)
        var_t = np.ones(1)
        t_obs = np.array([tsls_statistic(grams, E, beta0)])
        basis = None
    elif kind == "tsls_est":
        _, dpd_diff, dpy_diff = _diff_quantities(grams, E)
        beta_hat = dpy_diff / dpd_diff
        s11 = grams.sigma_hat(beta_hat)[0, 0]
        if s11 <= 0:
            raise NegativeVariance(f"plug-in sigma11 estimate {s11:.3g}")
        ratio = np.concatenate([d_vec, [dpd_diff]])   # Sigma_ST / Sigma_T
        k1 = -ratio[:, None]
        mu_t = np.array([float(beta0)])
        var_t = np.array([s11 / dpd_diff])
        t_obs = np.array([beta_hat])
        basis = None
    else:
        s11 = grams.sigma_hat(beta0)[0, 0]
        if s11 <= 0:
            raise NegativeVariance(f"sigma11 estimate {s11:.3g} at beta0={beta0}")
        m_mat = grams.ztz - sub.zpez
        m_mat = 0.5 * (m_mat + m_mat.T)
        eigvals, eigvecs = np.linalg.eigh(m_mat)
        d_r = big_l - k
        vals = eigvals[-d_r:]
        if vals[0] <= _RANK_KEEP * vals[-1]:
            raise ValueError("rank of Z'(I - P_ZE)Z fell below L - |E|")
        if k > 0 and eigvals[k - 1] > _RANK_DROP * vals[-1]:
            raise ValueError("rank of Z'(I - P_ZE)Z exceeds L - |E|")
        vecs = eigvecs[:, -d_r:].copy()
        for j in range(d_r):           # deterministic orientation
            i = np.argmax(np.abs(vecs[:, j]))
            if vecs[i, j] < 0:
                vecs[:, j] = -vecs[:, j]
        basis = vecs
        bottom = (d_vec @ basis) / vals
        k1 = -np.vstack([basis, bottom[None, :]])
        mu_t = np.zeros(d_r)
        var_t = s11 * vals
        t_tilde = (grams.zty - beta0 * grams.ztd) - (sub.zpey - beta0 * sub.zped)
        t_obs = basis.T @ t_tilde

    k2 = np.zeros((big_l + 1, big_l + 1))
    k2[:big_l, :big_l] = grams.ztz
    k2[:big_l, big_l] = grams.ztd
    k2[big_l, :big_l] = grams.ztd
    k2[big_l, big_l] = grams.dpd
    k2 += sel.tuning.epsilon * np.eye(big_l + 1)

    k3 = s_obs + k1 @ t_obs

    idx = list(E)
    jac_block = np.empty((k + 1, k + 1))
    jac_block[0, 0] = grams.dpd
    if k:
        jac_block[0, 1:] = grams.ztd[idx]
        jac_block[1:, 0] = grams.ztd[idx]
        jac_block[1:, 1:] = grams.ztz[np.ix_(idx, idx)]
    sign, logdet = np.linalg.slogdet(jac_block + sel.tuning.epsilon * np.eye(k + 1))
    if sign <= 0:
        raise ValueError("reparametrization Jacobian is not positive")
    log_jacobian = logdet + (big_l - k) * np.log(sel.tuning.lam)

    inactive = np.setdiff1d(np.arange(big_l), np.array(idx, dtype=int)).astype(np.int64)
    const = -k3.copy()
    const[idx] += sel.tuning.lam * sel.signs
    k2_active = k2[:, idx + [big_l]]
    joint_transform, cond_sd = _joint_preconditioner(
        k1, k2_active, var_t, np.asarray(sel.omega_scale, dtype=float), idx, big_l)

    return DensitySpec(
        kind=kind, beta0=float(beta0), E=E, signs=np.asarray(sel.signs, dtype=float),
        lam=sel.tuning.lam, epsilon=sel.tuning.epsilon, family=sel.family,
        omega_scale=np.asarray(sel.omega_scale, dtype=float),
        mu_t=mu_t, var_t=var_t, sigma_st=-k1 * var_t[None, :],
        k1=k1, k2=k2, k3=k3, s_obs=s_obs, log_jacobian=float(log_jacobian),
        t_obs=t_obs, sigma11=float(s11), basis=basis,
        init_beta=float(sel.beta), init_alpha=sel.alpha[idx].copy(),
        init_u=sel.subgrad[inactive].copy(),
        k2_active=k2_active, inactive=inactive, const=const,
        joint_transform=joint_transform, cond_sd=cond_sd)


def _joint_preconditioner(k1, k2_active, var_t, omega_scale, active_idx, big_l):
    """Square root of the (t, alpha_E, beta) covariance implied by the tight
    randomization coordinates.

    The statistic and the coefficients are near-collinear: the randomization
    pins their combination to a sd far smaller than their marginal spread.
    Proposing joint moves shaped by the inverse of that precision lets the
    chain traverse the ridge. Only the active-instrument rows and the
    exposure-score row count; the inactive rows are effectively flat because
    the subgradient absorbs them across its whole box.
    """
    rows = list(active_idx) + [big_l]
    b = np.hstack([k1[rows], k2_active[rows]])
    w = 1.0 / omega_scale[rows] ** 2
    prec = (b * w[:, None]).T @ b
    d = var_t.shape[0]
    prec[:d, :d] += np.diag(1.0 / var_t)
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(prec) / prec.shape[0]
        chol = np.linalg.cholesky(prec + jitter * np.eye(prec.shape[0]))
    # prec = chol chol'; inv(prec) = U U' with U = inv(chol)', upper triangular
    transform = np.linalg.solve(chol, np.eye(prec.shape[0])).T
    return transform, 1.0 / np.sqrt(np.diag(prec))


def in_box(spec: DensitySpec, beta, alpha_e, u_inactive) -> bool:
    """Sign pattern preserved on the active block, subgradient inside the cube."""
    alpha_e = np.asarray(alpha_e, dtype=float)
    u_inactive = np.asarray(u_inactive, dtype=float)
    if alpha_e.shape[0] != len(spec.E) or u_inactive.shape[0] != spec.n_inactive:
        raise ValueError("state dimensions do not match the spec")
    if np.any(alpha_e * spec.signs <= 0.0):
        return False
    if spec.n_inactive and np.max(np.abs(u_inactive)) > 1.0:
        return False
    return bool(np.isfinite(beta))


def reconstruct_omega(spec: DensitySpec, t, beta, alpha_e, u_inactive) -> np.ndarray:
    """Map a sampler state back to the randomization vector it implies."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    coef = np.concatenate([np.asarray(alpha_e, dtype=float).ravel(), [float(beta)]])
    w = spec.k1 @ t + spec.k2_active @ coef + spec.const
    if spec.n_inactive:
        w[spec.inactive] += spec.lam * np.asarray(u_inactive, dtype=float)
    return w


def log_density(spec: DensitySpec, t, beta, alpha_e, u_inactive) -> float:
    """Unnormalized conditional log density at one state; -inf outside the box."""
    if not in_box(spec, beta, alpha_e, u_inactive):
        return -np.inf
    t = np.atleast_1d(np.asarray(t, dtype=float))
    gauss = float(np.sum(-0.5 * (t - spec.mu_t) ** 2 / spec.var_t
                         - 0.5 * np.log(2.0 * np.pi * spec.var_t)))
    w = reconstruct_omega(spec, t, beta, alpha_e, u_inactive)
    return gauss + omega_log_density(spec.family, spec.omega_scale, w) \
        + spec.log_jacobian


def ar_statistic_from_intermediate(spec: DensitySpec, t_tilde, data) -> float:
    """Map one intermediary vector to the AR statistic at the spec's null value."""
    if spec.kind != "ar_intermediate":
        raise ValueError("spec must be built with kind='ar_intermediate'")
    grams = as_grams(data)
    t_tilde = np.asarray(t_tilde, dtype=float)
    quad = float(t_tilde @ grams.ztz_solve(t_tilde))
    dof = grams.L - len(spec.E)
    den = grams.residual_quad(spec.beta0) / (grams.n - grams.L)
    return (quad / dof) / den


def ar_quadratics(spec: DensitySpec, t_reduced, data) -> np.ndarray:
    """(Z'Z)-weighted quadratic of intermediary draws, rows of ``t_reduced``."""
    grams = as_grams(data)
    t_full = np.atleast_2d(t_reduced) @ spec.basis.T
    sol = grams.ztz_solve(t_full.T)
    return np.einsum("ij,ji->i", t_full, sol)


def observed_statistic(grams, E, beta0: float, kind: str) -> float:
    """Observed value of the statistic the spec kind samples."""
    grams = as_grams(grams)
    if kind == "tsls_stat":
        return tsls_statistic(grams, E, beta0)
    if kind == "tsls_est":
        return tsls_estimate(grams, E)
    if kind == "ar_intermediate":
        return ar_statistic(grams, E, beta0)
    raise ValueError(f"unknown kind {kind!r}")
