"""Randomized L1 instrument selection and its KKT certificate.

Solves the penalized program

    min_{a, b}  .5 ||P_Z (Y - Z a - D b)||^2 + lam ||a||_1
                - omega'(a; b) + (eps/2) ||(a; b)||^2

by cyclic coordinate descent on the gram quantities only, then extracts the
selected set, signs, and the full subgradient so the conditional density can
be reparametrized through the stationarity map.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import _kernel
from .exceptions import NoConvergence
from .iv_core import Grams, as_grams

KKT_RTOL = 1e-6       # converged solutions satisfy residual < KKT_RTOL * lam
ACTIVE_TOL = 1e-10    # |alpha_j| below this is zeroed before sign extraction

FAMILIES = {"gaussian": _kernel.GAUSSIAN, "laplace": _kernel.LAPLACE}


def _scale_unit(grams: Grams) -> float:
    """Gram magnitude relative to the individual-level n-scale convention."""
    if grams.is_summary:
        return grams.ztz[0, 0] / grams.n
    return 1.0


def default_lambda(grams) -> float:
    """2.01 sqrt(n log n), expressed in the gram scale of the input."""
    grams = as_grams(grams)
    n = grams.n
    return 2.01 * math.sqrt(n * math.log(n)) * _scale_unit(grams)


def default_epsilon(grams) -> float:
    grams = as_grams(grams)
    return 0.01 * _scale_unit(grams)


def default_omega_scale(grams) -> float:
    """Entry-sd of P_Z[Z D] times entry-sd of P_Z Y, halved, with the n/(n-1) factor.

    Both factors reduce to exact gram identities because the columns are
    centered: sd(P_Z[Z D]) = sqrt((tr Z'Z + D'P_Z D) / (n (L+1))) and
    sd(P_Z Y) = sqrt(Y'P_Z Y / n).
    """
    grams = as_grams(grams)
    n, big_l = grams.n, grams.L
    col_ms = (np.trace(grams.ztz) + grams.dpd) / (n * (big_l + 1))
    return 0.5 * math.sqrt(col_ms) * math.sqrt(grams.ypy / n) * math.sqrt(n / (n - 1.0))


def carving_omega_scale(grams) -> float:
    """Heavy data-carving randomization: variance of order n.

    Uses the root-mean column norm of P_Z[Z D] instead of the entry sd,
    i.e. sqrt(n) times the default; atypical selection events then occur
    with appreciable probability, which is the regime where conditional
    and naive intervals separate sharply.
    """
    grams = as_grams(grams)
    return default_omega_scale(grams) * math.sqrt(grams.n)


def carving_epsilon(grams) -> float:
    """Ridge strong enough to keep weakly identified directions bounded
    under the heavy carving randomization."""
    grams = as_grams(grams)
    return 2.0 * carving_omega_scale(grams) / math.sqrt(grams.n)


@dataclass(frozen=True)
class TuningParams:
    """L1 penalty and ridge coefficient of the selection program."""

    lam: float
    epsilon: float = 0.01

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")

    @classmethod
    def default(cls, grams) -> "TuningParams":
        grams = as_grams(grams)
        return cls(lam=default_lambda(grams), epsilon=default_epsilon(grams))


@dataclass(frozen=True)
class RandomizationSpec:
    """Family, per-coordinate scale, and seed of the randomization draw.

    ``scale`` may be a scalar, a length L+1 vector, or None for the
    data-driven default; it is the standard deviation for either family.
    """

    family: str = "gaussian"
    scale: float | np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.scale is not None and np.any(np.asarray(self.scale) <= 0):
            raise ValueError("scale must be strictly positive")

    def scale_vector(self, grams) -> np.ndarray:
        grams = as_grams(grams)
        scale = default_omega_scale(grams) if self.scale is None else self.scale
        return np.broadcast_to(np.asarray(scale, dtype=float), (grams.L + 1,)).copy()

    def draw(self, grams) -> np.ndarray:
        """One realized omega; deterministic in the seed, linear in the scale."""
        scale = self.scale_vector(grams)
        rng = np.random.default_rng(self.seed)
        if self.family == "gaussian":
            return scale * rng.standard_normal(scale.shape[0])
        return scale * rng.laplace(0.0, 1.0 / math.sqrt(2.0), scale.shape[0])


def omega_log_density(family: str, scale: np.ndarray, w: np.ndarray) -> float:
    """Log density of the randomization vector at w."""
    return _kernel.g_logpdf(np.asarray(w, dtype=float),
                            np.asarray(scale, dtype=float), FAMILIES[family])


@dataclass
class SelectionResult:
    """Selected set, signs, solution, subgradient, and the drawn randomization."""

    E: tuple
    signs: np.ndarray
    alpha: np.ndarray
    beta: float
    subgrad: np.ndarray
    omega: np.ndarray
    tuning: TuningParams
    family: str
    omega_scale: np.ndarray
    seed: int
    n_sweeps: int

    @property
    def n_selected(self) -> int:
        return len(self.E)

    def coef_vector(self) -> np.ndarray:
        return np.concatenate([self.alpha, [self.beta]])

    def to_dict(self) -> dict:
        return {
            "E": list(self.E),
            "signs": self.signs.tolist(),
            "alpha": self.alpha.tolist(),
            "beta": self.beta,
            "subgrad": self.subgrad.tolist(),
            "omega": self.omega.tolist(),
            "lambda": self.tuning.lam,
            "epsilon": self.tuning.epsilon,
            "family": self.family,
            "omega_scale": self.omega_scale.tolist(),
            "seed": self.seed,
            "n_sweeps": self.n_sweeps,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionResult":
        return cls(
            E=tuple(d["E"]), signs=np.asarray(d["signs"], dtype=float),
            alpha=np.asarray(d["alpha"], dtype=float), beta=float(d["beta"]),
            subgrad=np.asarray(d["subgrad"], dtype=float),
            omega=np.asarray(d["omega"], dtype=float),
            tuning=TuningParams(lam=d["lambda"], epsilon=d["epsilon"]),
            family=d["family"],
            omega_scale=np.asarray(d["omega_scale"], dtype=float),
            seed=int(d["seed"]), n_sweeps=int(d["n_sweeps"]))

    @classmethod
    def from_json(cls, s: str) -> "SelectionResult":
        return cls.from_dict(json.loads(s))


def stationarity_gap(grams, alpha, beta, subgrad, tuning: TuningParams) -> np.ndarray:
    """Stationarity map minus omega would be this vector minus omega.

    Returns (Gram + eps I)(alpha; beta) + lam (u; 0) - (Z'Y; D'P_Z Y), i.e.
    the omega implied by the certificate (the reconstruction map).
    """
    grams = as_grams(grams)
    score = np.empty(grams.L + 1)
    score[:-1] = grams.ztz @ alpha + grams.ztd * beta - grams.zty
    score[-1] = grams.ztd @ alpha + grams.dpd * beta - grams.dpy
    pen = np.concatenate([tuning.lam * subgrad, [0.0]])
    ridge = tuning.epsilon * np.concatenate([alpha, [beta]])
    return score + pen + ridge


def kkt_residual(grams, result: SelectionResult) -> float:
    """Max-norm violation of the stationarity condition at the certificate."""
    implied = stationarity_gap(grams, result.alpha, result.beta,
                               result.subgrad, result.tuning)
    return float(np.max(np.abs(implied - result.omega)))


def objective(grams, tuning: TuningParams, omega, alpha, beta) -> float:
    """Value of the randomized selection objective at (alpha, beta)."""
    grams = as_grams(grams)
    alpha = np.asarray(alpha, dtype=float)
    quad = grams.ypy - 2.0 * (alpha @ grams.zty + beta * grams.dpy) \
        + alpha @ grams.ztz @ alpha + 2.0 * beta * (alpha @ grams.ztd) \
        + beta * beta * grams.dpd
    coef = np.concatenate([alpha, [beta]])
    return 0.5 * quad + tuning.lam * np.abs(alpha).sum() \
        - float(np.asarray(omega) @ coef) + 0.5 * tuning.epsilon * float(coef @ coef)


def solve_randomized_sisvive(data, tuning: TuningParams | None = None,
                             rand: RandomizationSpec | None = None,
                             omega: np.ndarray | None = None,
                             max_sweeps: int = 500_000,
                             tol: float = 1e-10) -> SelectionResult:
    """Solve the randomized selection program and extract its KKT certificate.

    Parameters
    ----------
    data : IVData, Grams, or GramSummary
        Only gram quantities are used, so individual-level and summary
        inputs share this path.
    tuning : optional TuningParams; defaults to the formula-based values.
    rand : optional RandomizationSpec; defaults to a gaussian draw at the
        data-driven scale with seed 0.
    omega : optional explicit randomization vector overriding the draw
        (the zero vector recovers the unrandomized program).
    """
    grams = as_grams(data)
    if tuning is None:
        tuning = TuningParams.default(grams)
    if rand is None:
        rand = RandomizationSpec()
    scale = rand.scale_vector(grams)
    if omega is None:
        omega = rand.draw(grams)
    else:
        omega = np.asarray(omega, dtype=float)
        if omega.shape != (grams.L + 1,):
            raise ValueError(f"omega must have length {grams.L + 1}")

    alpha, beta, sweeps, converged = _kernel.cd_solve(
        grams.ztz, grams.zty, grams.ztd, grams.dpd, grams.dpy,
        omega, tuning.lam, tuning.epsilon, tol, max_sweeps,
        0.5 * KKT_RTOL * tuning.lam)
    if not converged:
        raise NoConvergence(
            f"coordinate descent did not reach tolerance in {max_sweeps} sweeps")

    alpha = np.where(np.abs(alpha) > ACTIVE_TOL, alpha, 0.0)
    active = np.flatnonzero(alpha)
    E = tuple(int(j) for j in active)
    signs = np.sign(alpha[active])

    # inactive subgradient recovered from stationarity; active entries are signs
    subgrad = np.zeros(grams.L)
    subgrad[active] = signs
    implied_zero_u = stationarity_gap(grams, alpha, beta, np.zeros(grams.L), tuning)
    inactive = np.setdiff1d(np.arange(grams.L), active)
    subgrad[inactive] = (omega[inactive] - implied_zero_u[inactive]) / tuning.lam
    overflow = np.max(np.abs(subgrad[inactive]), initial=0.0) - 1.0
    if overflow > 1e-6:
        raise NoConvergence(
            f"inactive subgradient exceeds 1 by {overflow:.2e}; solution not optimal")
    np.clip(subgrad, -1.0, 1.0, out=subgrad)

    result = SelectionResult(
        E=E, signs=signs, alpha=alpha, beta=float(beta), subgrad=subgrad,
        omega=omega, tuning=tuning, family=rand.family, omega_scale=scale,
        seed=rand.seed, n_sweeps=sweeps)
    resid = kkt_residual(grams, result)
    if resid >= KKT_RTOL * tuning.lam:
        raise NoConvergence(
            f"KKT residual {resid:.3e} >= {KKT_RTOL:g} * lam = {KKT_RTOL * tuning.lam:.3e}")
    return result
