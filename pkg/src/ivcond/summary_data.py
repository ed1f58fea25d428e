"""Gram reconstruction from GWAS summary statistics and the summary pipeline.

Per-instrument marginal regression coefficients and standard errors pin the
cross products Z'Y, Z'D, Z'Z (diagonal) and Y'Y up to one unknown factor c;
the exposure-side identity recovers D'D. Selection and inference run on
those grams unchanged, and results are invariant to c once the penalty,
ridge, and randomization scale are expressed in c-units.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import InconsistentScale
from .inference import InferenceResult, conditional_inference
from .iv_core import Grams, tsls_estimate
from .sampler import SamplerConfig
from .sisvive import RandomizationSpec, TuningParams, solve_randomized_sisvive

SCALE_SPREAD_TOL = 0.2   # relative disagreement of implied D'D before warning


@dataclass(frozen=True)
class SummaryData:
    """Per-instrument marginal GWAS coefficients with an effective sample size."""

    beta_y: np.ndarray
    se_y: np.ndarray
    beta_d: np.ndarray
    se_d: np.ndarray
    n_eff: float

    def __post_init__(self):
        for name in ("beta_y", "se_y", "beta_d", "se_d"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        big_l = self.beta_y.shape[0]
        if not (self.se_y.shape[0] == self.beta_d.shape[0] == self.se_d.shape[0] == big_l):
            raise ValueError("summary columns must share one length")
        if big_l < 2:
            raise ValueError(f"need at least 2 instruments, got {big_l}")
        if np.any(self.se_y <= 0) or np.any(self.se_d <= 0):
            raise ValueError("standard errors must be strictly positive")
        if self.n_eff <= big_l:
            raise ValueError(f"need n_eff > L, got n_eff={self.n_eff}, L={big_l}")

    @property
    def L(self) -> int:
        return self.beta_y.shape[0]


@dataclass(frozen=True)
class GramSummary:
    """Gram quantities known up to the factor fixed by Z_(1)'Z_(1) = c."""

    ztz_diag: np.ndarray
    zty: np.ndarray
    ztd: np.ndarray
    yty: float
    dtd: float
    n_eff: float
    c_convention: float = 1.0

    def to_grams(self) -> Grams:
        return Grams.from_arrays(
            n=self.n_eff, ztz=np.diag(self.ztz_diag), zty=self.zty,
            ztd=self.ztd, yty=self.yty, dtd=self.dtd, ytd=None)

    def scaled(self, factor: float) -> "GramSummary":
        """The same data under a different unknown-factor convention."""
        return GramSummary(
            ztz_diag=self.ztz_diag * factor, zty=self.zty * factor,
            ztd=self.ztd * factor, yty=self.yty * factor,
            dtd=self.dtd * factor, n_eff=self.n_eff,
            c_convention=self.c_convention * factor)

    @property
    def grams(self) -> Grams:
        return self.to_grams()


def reconstruct_grams(s: SummaryData, c: float = 1.0) -> GramSummary:
    """Rebuild the gram quantities from marginal summaries.

    Assumes pairwise-uncorrelated instruments (diagonal Z'Z) and centered
    underlying data. The outcome-side identity fixes Z'Z, Z'Y, Z'D, and Y'Y
    up to c; the exposure-side analog gives D'D, and disagreement between
    its per-instrument values beyond 20% raises an InconsistentScale warning.
    """
    n = s.n_eff
    k_y = (n - 1.0) * s.se_y ** 2 + s.beta_y ** 2
    ratio = k_y[0] / k_y
    ztz_diag = ratio * c
    zty = s.beta_y * ratio * c
    ztd = s.beta_d * ratio * c
    yty = k_y[0] * c
    k_d = (n - 1.0) * s.se_d ** 2 + s.beta_d ** 2
    dtd_implied = k_d * ztz_diag
    spread = (dtd_implied.max() - dtd_implied.min()) / dtd_implied.mean()
    if spread > SCALE_SPREAD_TOL:
        warnings.warn(
            f"exposure-side D'D values disagree by {spread:.1%}; "
            "instruments may be correlated or data uncentered",
            InconsistentScale, stacklevel=2)
    return GramSummary(ztz_diag=ztz_diag, zty=zty, ztd=ztd, yty=yty,
                       dtd=float(dtd_implied.mean()), n_eff=n, c_convention=c)


def summary_sigma_hat(s: SummaryData, g: GramSummary, beta_tsls: float) -> np.ndarray:
    """Error covariance (up to c) from the diagonal reduced-form residual
    variances, mapped through the plug-in effect value."""
    return g.to_grams().sigma_hat(beta_tsls)


def summary_pipeline(s: SummaryData, tuning: TuningParams | None = None,
                     rand: RandomizationSpec | None = None,
                     kind: str = "tsls_stat", level: float = 0.95,
                     null_value: float = 0.0,
                     cfg: SamplerConfig | None = None,
                     scale_factor: float = 1.0) -> InferenceResult:
    """Selection plus conditional inference straight from summary statistics.

    ``scale_factor`` rescales the reconstructed grams (a different value of
    the unknown factor c); with default tuning and randomization the selected
    set, p-value, and interval do not depend on it.
    """
    gram_summary = reconstruct_grams(s, c=scale_factor)
    grams = gram_summary.to_grams()
    if tuning is None:
        tuning = TuningParams.default(grams)
    if rand is None:
        rand = RandomizationSpec()
    sel = solve_randomized_sisvive(grams, tuning, rand)
    result = conditional_inference(grams, sel, kind=kind, null_value=null_value,
                                   level=level, cfg=cfg)
    result.diagnostics["selected"] = list(sel.E)
    result.diagnostics["signs"] = sel.signs.tolist()
    result.diagnostics["beta_tsls"] = tsls_estimate(grams, sel.E)
    result.diagnostics["c_convention"] = gram_summary.c_convention
    return result


SUMMARY_HEADER = ["snp", "beta_exposure", "se_exposure", "beta_outcome", "se_outcome"]


def read_summary_csv(path, n_eff: float):
    """Load a summary CSV; returns (SummaryData, snp names)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != SUMMARY_HEADER:
            raise ValueError(
                f"{path}: header must be {','.join(SUMMARY_HEADER)}")
        names, rows = [], []
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ValueError(f"{path}:{i}: expected 5 fields, got {len(row)}")
            names.append(row[0])
            try:
                rows.append([float(x) for x in row[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{i}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    data = SummaryData(beta_d=arr[:, 0], se_d=arr[:, 1],
                       beta_y=arr[:, 2], se_y=arr[:, 3], n_eff=float(n_eff))
    return data, names
