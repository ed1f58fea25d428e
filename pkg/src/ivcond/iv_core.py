"""Data model, projections, and classical IV estimators and test statistics.

Everything downstream of the raw data works off cross-product (Gram)
quantities, so individual-level matrices and GWAS summary reconstructions
share a single code path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.stats import f as f_dist
from scipy.stats import norm

from .exceptions import AllInvalid, DegenerateDenominator, NegativeVariance

# D'(P_Z - P_{Z_E})D below this fraction of D'D counts as no usable strength
DENOM_RTOL = 1e-10


class IVData:
    """Centered individual-level outcome / exposure / instrument data.

    Inputs are centered column-wise on construction; already-centered inputs
    pass through unchanged. The instrument matrix must have full column rank
    and more rows than columns.
    """

    def __init__(self, Y, D, Z):
        Y = np.array(Y, dtype=float).ravel()
        D = np.array(D, dtype=float).ravel()
        Z = np.atleast_2d(np.array(Z, dtype=float))
        if Z.shape[0] == 1 and Y.shape[0] > 1:
            Z = Z.T
        n, L = Z.shape
        if Y.shape[0] != n or D.shape[0] != n:
            raise ValueError(f"inconsistent lengths: Y {Y.shape[0]}, D {D.shape[0]}, Z rows {n}")
        if n <= L:
            raise ValueError(f"need n > L, got n={n}, L={L}")
        self.y_mean = Y.mean()
        self.d_mean = D.mean()
        self.z_mean = Z.mean(axis=0)
        self.Y = Y - self.y_mean
        self.D = D - self.d_mean
        self.Z = Z - self.z_mean
        self.n = n
        self.L = L
        _, R, _ = scipy.linalg.qr(self.Z, mode="economic", pivoting=True)
        rdiag = np.abs(np.diag(R))
        if rdiag[-1] <= max(n, L) * np.finfo(float).eps * rdiag[0]:
            raise ValueError("instrument matrix is rank deficient")
        self._projections = None
        self._grams = None

    @property
    def projections(self) -> "ProjectionCache":
        if self._projections is None:
            self._projections = ProjectionCache(self.Z)
        return self._projections

    @property
    def grams(self) -> "Grams":
        if self._grams is None:
            self._grams = Grams.from_data(self)
        return self._grams


@dataclass(frozen=True)
class ModelParams:
    """Ground-truth structural parameters; used by the simulation harness."""

    beta: float
    alpha: np.ndarray
    gamma: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float))
        sig = np.asarray(self.sigma, dtype=float)
        if sig.shape != (2, 2) or not np.allclose(sig, sig.T):
            raise ValueError("sigma must be symmetric 2x2")
        if np.linalg.det(sig) <= 0:
            raise ValueError("sigma must be positive definite")
        object.__setattr__(self, "sigma", sig)
        if self.alpha.shape != self.gamma.shape:
            raise ValueError("alpha and gamma must have equal length")

    @property
    def invalid_set(self):
        return tuple(np.flatnonzero(self.alpha != 0.0))


class ProjectionCache:
    """Thin-QR factorizations applying P_Z and P_{Z_E} for any subset E."""

    def __init__(self, Z):
        self.Z = np.asarray(Z, dtype=float)
        self.q_full, _ = np.linalg.qr(self.Z)
        self._subset_q = {}

    def _q_for(self, E):
        E = _normalize_subset(E, self.Z.shape[1])
        if len(E) == 0:
            return None
        if E not in self._subset_q:
            q, _ = np.linalg.qr(self.Z[:, list(E)])
            self._subset_q[E] = q
        return self._subset_q[E]

    def proj(self, v, E=None):
        """P_Z v, or P_{Z_E} v when a subset is given (empty E gives zero)."""
        v = np.asarray(v, dtype=float)
        if E is None:
            q = self.q_full
        else:
            q = self._q_for(E)
            if q is None:
                return np.zeros_like(v)
        return q @ (q.T @ v)

    def resid(self, v):
        """P_{Z-perp} v."""
        v = np.asarray(v, dtype=float)
        return v - self.proj(v)


def _normalize_subset(E, L):
    if E is None:
        return ()
    E = tuple(sorted(int(j) for j in E))
    if len(set(E)) != len(E):
        raise ValueError(f"duplicate indices in E={E}")
    if E and (E[0] < 0 or E[-1] >= L):
        raise ValueError(f"subset {E} out of range for L={L}")
    return E


@dataclass(frozen=True)
class SubsetGrams:
    """Cross products through P_{Z_E} for one instrument subset."""

    E: tuple
    dped: float     # D' P_{Z_E} D
    dpey: float     # D' P_{Z_E} Y
    ypey: float     # Y' P_{Z_E} Y
    zped: np.ndarray   # Z' P_{Z_E} D
    zpey: np.ndarray   # Z' P_{Z_E} Y
    zpez: np.ndarray   # Z' P_{Z_E} Z


@dataclass(frozen=True)
class Grams:
    """Cross-product summary of one dataset.

    ``ytd`` is None when the grams were reconstructed from GWAS summary
    statistics; covariance estimation then runs through the reduced-form
    residual variances instead of exact residual cross products.
    """

    n: float
    ztz: np.ndarray
    zty: np.ndarray
    ztd: np.ndarray
    yty: float
    dtd: float
    ytd: float | None
    chol: np.ndarray = field(repr=False)
    dpd: float = field(repr=False)
    dpy: float = field(repr=False)
    ypy: float = field(repr=False)
    _subsets: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_arrays(cls, n, ztz, zty, ztd, yty, dtd, ytd=None):
        ztz = np.asarray(ztz, dtype=float)
        zty = np.asarray(zty, dtype=float).ravel()
        ztd = np.asarray(ztd, dtype=float).ravel()
        chol = np.linalg.cholesky(ztz)
        wy = scipy.linalg.solve_triangular(chol, zty, lower=True)
        wd = scipy.linalg.solve_triangular(chol, ztd, lower=True)
        return cls(n=float(n), ztz=ztz, zty=zty, ztd=ztd, yty=float(yty),
                   dtd=float(dtd), ytd=None if ytd is None else float(ytd),
                   chol=chol, dpd=float(wd @ wd), dpy=float(wd @ wy),
                   ypy=float(wy @ wy))

    @classmethod
    def from_data(cls, data: IVData):
        Z, Y, D = data.Z, data.Y, data.D
        return cls.from_arrays(
            n=data.n, ztz=Z.T @ Z, zty=Z.T @ Y, ztd=Z.T @ D,
            yty=Y @ Y, dtd=D @ D, ytd=Y @ D)

    @property
    def L(self) -> int:
        return self.zty.shape[0]

    @property
    def is_summary(self) -> bool:
        return self.ytd is None

    def subset(self, E) -> SubsetGrams:
        E = _normalize_subset(E, self.L)
        if E not in self._subsets:
            if len(E) == 0:
                sub = SubsetGrams(E, 0.0, 0.0, 0.0,
                                  np.zeros(self.L), np.zeros(self.L),
                                  np.zeros((self.L, self.L)))
            else:
                idx = list(E)
                # Z_E'Z_E = (chol[:,E])'(chol[:,E]); QR of the factor columns
                # keeps the solves as well conditioned as a QR of Z_E itself.
                r_e = np.linalg.qr(self.chol.T[:, idx], mode="r")
                def _solve(rhs):
                    w = scipy.linalg.solve_triangular(r_e.T, rhs, lower=True)
                    return scipy.linalg.solve_triangular(r_e, w, lower=False)
                xd = _solve(self.ztd[idx])
                xy = _solve(self.zty[idx])
                zze = self.ztz[:, idx]
                sub = SubsetGrams(
                    E,
                    dped=float(self.ztd[idx] @ xd),
                    dpey=float(self.ztd[idx] @ xy),
                    ypey=float(self.zty[idx] @ xy),
                    zped=zze @ xd,
                    zpey=zze @ xy,
                    zpez=zze @ _solve(self.ztz[idx, :]),
                )
            self._subsets[E] = sub
        return self._subsets[E]

    def ztz_solve(self, rhs):
        """(Z'Z)^{-1} rhs via the stored Cholesky factor."""
        w = scipy.linalg.solve_triangular(self.chol, rhs, lower=True)
        return scipy.linalg.solve_triangular(self.chol.T, w, lower=False)

    # -- covariance estimation ------------------------------------------

    def _summary_resid_vars(self):
        dof = self.n - self.L + 1
        s2_yz = (self.yty - self.ypy) / dof
        s2_dz = (self.dtd - self.dpd) / dof
        if s2_yz <= 0 or s2_dz <= 0:
            raise NegativeVariance(
                f"reduced-form residual variances s2_yz={s2_yz:.3g}, s2_dz={s2_dz:.3g}")
        return s2_yz, s2_dz

    def sigma_hat(self, beta0: float) -> np.ndarray:
        """2x2 error-covariance estimate imposing the null value ``beta0``."""
        if self.is_summary:
            s2_yz, s2_dz = self._summary_resid_vars()
            b = float(beta0)
            return np.array([[s2_yz + b * b * s2_dz, -b * s2_dz],
                             [-b * s2_dz, s2_dz]])
        b = float(beta0)
        ryry = (self.yty - 2 * b * self.ytd + b * b * self.dtd) \
            - (self.ypy - 2 * b * self.dpy + b * b * self.dpd)
        ryd = (self.ytd - b * self.dtd) - (self.dpy - b * self.dpd)
        dd = self.dtd - self.dpd
        scale = (self.yty + self.dtd) / self.n
        out = np.array([[ryry, ryd], [ryd, dd]]) / self.n
        for i in (0, 1):
            if -1e-10 * scale < out[i, i] < 0.0:
                out[i, i] = 0.0
        return out

    def residual_quad(self, beta0: float) -> float:
        """(Y - D b0)' P_{Z-perp} (Y - D b0)."""
        if self.is_summary:
            s2_yz, s2_dz = self._summary_resid_vars()
            return (self.n - self.L + 1) * (s2_yz + beta0 ** 2 * s2_dz)
        b = float(beta0)
        return (self.yty - 2 * b * self.ytd + b * b * self.dtd) \
            - (self.ypy - 2 * b * self.dpy + b * b * self.dpd)


def as_grams(data) -> Grams:
    """Accept IVData, Grams, or anything exposing .to_grams()/.grams."""
    if isinstance(data, Grams):
        return data
    if isinstance(data, IVData):
        return data.grams
    if hasattr(data, "to_grams"):
        return data.to_grams()
    if hasattr(data, "grams"):
        return data.grams
    raise TypeError(f"cannot interpret {type(data).__name__} as gram data")


def _diff_quantities(grams: Grams, E):
    """Denominator/numerator pieces through P_Z - P_{Z_E}, with guards."""
    E = _normalize_subset(E, grams.L)
    if len(E) >= grams.L:
        raise AllInvalid("every instrument flagged invalid; effect unidentified")
    sub = grams.subset(E)
    dpd_diff = grams.dpd - sub.dped
    if dpd_diff <= DENOM_RTOL * grams.dtd:
        raise DegenerateDenominator(
            f"D'(P_Z - P_ZE)D = {dpd_diff:.3g} below {DENOM_RTOL:g} * D'D")
    return sub, dpd_diff, grams.dpy - sub.dpey


def tsls_estimate(data, E=()) -> float:
    """Two-stage least squares point estimate using instruments outside E."""
    grams = as_grams(data)
    _, dpd_diff, dpy_diff = _diff_quantities(grams, E)
    return dpy_diff / dpd_diff


def sigma_hat(data, beta0: float) -> np.ndarray:
    """Error covariance estimated under the null exposure effect ``beta0``."""
    return as_grams(data).sigma_hat(beta0)


def sigma_hat_plugin(data, E=()) -> np.ndarray:
    """Error covariance with the TSLS estimate plugged in for the effect."""
    grams = as_grams(data)
    return grams.sigma_hat(tsls_estimate(grams, E))


def tsls_statistic(data, E, beta0: float) -> float:
    """Standardized TSLS test statistic of H0: beta = beta0; N(0,1) limit."""
    grams = as_grams(data)
    _, dpd_diff, dpy_diff = _diff_quantities(grams, E)
    num = dpy_diff - beta0 * dpd_diff
    s11 = grams.sigma_hat(beta0)[0, 0]
    den = np.sqrt(s11) * np.sqrt(dpd_diff)
    if den == 0.0:
        if num == 0.0:
            return 0.0
        raise DegenerateDenominator("zero variance with nonzero score")
    return num / den


def ar_statistic(data, E, beta0: float) -> float:
    """Anderson-Rubin statistic; F(L-|E|, n-L) under the null with Normal errors."""
    grams = as_grams(data)
    E = _normalize_subset(E, grams.L)
    if len(E) >= grams.L:
        raise AllInvalid("every instrument flagged invalid; effect unidentified")
    sub = grams.subset(E)
    b = float(beta0)
    ry_pz = grams.ypy - 2 * b * grams.dpy + b * b * grams.dpd
    ry_pe = sub.ypey - 2 * b * sub.dpey + b * b * sub.dped
    num = (ry_pz - ry_pe) / (grams.L - len(E))
    den = grams.residual_quad(b) / (grams.n - grams.L)
    return num / den


@dataclass(frozen=True)
class NaiveInterval:
    """Classical interval that treats the selected set as fixed a priori."""

    lower: float
    upper: float
    level: float
    statistic: str
    unbounded: bool = False
    disconnected: bool = False
    empty: bool = False

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def naive_interval(data, E=(), level: float = 0.95, statistic: str = "tsls") -> NaiveInterval:
    """Confidence interval ignoring that E was data-selected.

    ``tsls`` gives the Wald interval around the TSLS estimate. ``ar`` inverts
    the Anderson-Rubin acceptance region by grid search plus bisection and
    returns the convex hull of accepted null values, flagging unbounded or
    disconnected acceptance regions.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0,1), got {level}")
    grams = as_grams(data)
    E = _normalize_subset(E, grams.L)
    _, dpd_diff, dpy_diff = _diff_quantities(grams, E)
    beta_hat = dpy_diff / dpd_diff
    s11 = grams.sigma_hat(beta_hat)[0, 0]
    se = np.sqrt(max(s11, 0.0) / dpd_diff)

    if statistic == "tsls":
        z = norm.ppf(0.5 + level / 2)
        return NaiveInterval(beta_hat - z * se, beta_hat + z * se, level, "tsls")
    if statistic != "ar":
        raise ValueError(f"unknown statistic {statistic!r}")

    crit = f_dist.ppf(level, grams.L - len(E), grams.n - grams.L)

    def excess(b0):
        return ar_statistic(grams, E, b0) - crit

    half = 20 * se if se > 0 else 20 * max(abs(beta_hat), 1.0)
    grid = np.linspace(beta_hat - half, beta_hat + half, 2001)
    vals = np.array([excess(b) for b in grid])
    accepted = vals <= 0
    if not accepted.any():
        return NaiveInterval(np.nan, np.nan, level, "ar", empty=True)
    disconnected = accepted.sum() < (np.flatnonzero(accepted)[-1] - np.flatnonzero(accepted)[0] + 1)
    unbounded = bool(accepted[0] or accepted[-1])
    lo_idx = np.flatnonzero(accepted)[0]
    hi_idx = np.flatnonzero(accepted)[-1]
    lower = grid[lo_idx]
    upper = grid[hi_idx]
    if lo_idx > 0:
        lower = scipy.optimize.brentq(excess, grid[lo_idx - 1], grid[lo_idx])
    if hi_idx < len(grid) - 1:
        upper = scipy.optimize.brentq(excess, grid[hi_idx], grid[hi_idx + 1])
    return NaiveInterval(lower, upper, level, "ar",
                         unbounded=unbounded, disconnected=disconnected)


def read_ivdata_csv(path) -> IVData:
    """Load a `Y,D,Z1,...,ZL` CSV (UTF-8, '.' decimals) into IVData."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in header]
        L = len(header) - 2
        expected = ["Y", "D"] + [f"Z{j}" for j in range(1, L + 1)]
        if L < 1 or header != expected:
            raise ValueError(
                f"{path}: header must be Y,D,Z1,...,ZL; got {','.join(header)}")
        rows = []
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{i}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{i}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    return IVData(arr[:, 0], arr[:, 1], arr[:, 2:])
