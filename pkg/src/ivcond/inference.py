"""Conditional p-values and selective confidence intervals from chain traces.

Intervals come from one reference chain sampled at the TSLS estimate,
reweighted to other null values by self-normalized importance sampling, and
inverted with bisection on the pivot. Collapsed weights trigger fresh
reference chains closer to the query point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cond_density import ar_quadratics, build_density, DensitySpec
from .exceptions import BracketNotFound, DegenerateWeights
from .iv_core import as_grams, naive_interval, tsls_estimate
from .sampler import ChainResult, SamplerConfig, run_chain, with_seed
from .sisvive import SelectionResult, FAMILIES
from . import _kernel

PIVOT_TOL = 0.005          # |pivot - target| tolerance of the inversion
MAX_BISECT = 40
MAX_EXPAND = 20
MAX_WEIGHT = 0.99          # larger normalized weights mean a collapsed sample


@dataclass
class InferenceResult:
    """P-value, interval, and sampler diagnostics for one analysis."""

    pvalue: float | None
    ci_lower: float
    ci_upper: float
    level: float
    n_samples: int
    reference_beta: float
    kind: str
    null_value: float | None
    diagnostics: dict

    @property
    def ci(self):
        return (self.ci_lower, self.ci_upper)

    def contains(self, value: float) -> bool:
        return self.ci_lower <= value <= self.ci_upper

    def to_dict(self) -> dict:
        return {
            "pvalue": self.pvalue,
            "ci": [self.ci_lower, self.ci_upper],
            "level": self.level,
            "n_samples": self.n_samples,
            "reference_beta": self.reference_beta,
            "kind": self.kind,
            "null_value": self.null_value,
            "diagnostics": self.diagnostics,
        }


def conditional_pvalue(trace, observed: float, tail: str = "right") -> float:
    """Empirical tail frequency of the observed value in the sampled null law."""
    trace = np.asarray(trace, dtype=float).ravel()
    if trace.size == 0:
        raise ValueError("empty trace")
    right = float(np.mean(trace >= observed))
    left = float(np.mean(trace <= observed))
    if tail == "right":
        return right
    if tail == "left":
        return left
    if tail == "two-sided":
        return min(1.0, 2.0 * min(left, right))
    raise ValueError(f"unknown tail {tail!r}")


# -- importance reweighting between density specs ---------------------------

def _chain_rest(chain: ChainResult) -> np.ndarray:
    """Null-value-free part of the reconstructed omega for every draw."""
    rest = getattr(chain, "_rest", None)
    if rest is None:
        spec = chain.spec
        coef = np.column_stack([chain.alpha_E, chain.beta])
        base = -spec.s_obs.copy()
        if len(spec.E):
            base[list(spec.E)] += spec.lam * spec.signs
        rest = coef @ spec.k2_active.T + base
        if spec.n_inactive:
            rest[:, spec.inactive] += spec.lam * chain.u_inactive
        chain._rest = rest
    return rest


def _gauss_rows(t: np.ndarray, spec: DensitySpec) -> np.ndarray:
    return np.sum(-0.5 * (t - spec.mu_t) ** 2 / spec.var_t
                  - 0.5 * np.log(2.0 * np.pi * spec.var_t), axis=1)


def _g_rows(omega: np.ndarray, spec: DensitySpec) -> np.ndarray:
    scale = spec.omega_scale
    if FAMILIES[spec.family] == _kernel.GAUSSIAN:
        return np.sum(-0.5 * (omega / scale) ** 2, axis=1) \
            - np.sum(np.log(scale) + 0.5 * math.log(2.0 * math.pi))
    b = scale / math.sqrt(2.0)
    return np.sum(-np.abs(omega) / b, axis=1) - np.sum(np.log(2.0 * b))


def log_weights(chain: ChainResult, spec_target: DensitySpec) -> np.ndarray:
    """Log importance weights from the chain's reference law to the target law."""
    spec_ref = chain.spec
    if spec_target.kind != spec_ref.kind or spec_target.E != spec_ref.E:
        raise ValueError("target spec must share the reference kind and selection")
    rest = _chain_rest(chain)
    w_ref = rest + (chain.t - spec_ref.t_obs) @ spec_ref.k1.T
    w_tgt = rest + (chain.t - spec_target.t_obs) @ spec_target.k1.T
    logw = _g_rows(w_tgt, spec_target) - _g_rows(w_ref, spec_ref)
    logw += _gauss_rows(chain.t, spec_target) - _gauss_rows(chain.t, spec_ref)
    return logw


def _normalized_weights(logw: np.ndarray, t_rows: np.ndarray) -> np.ndarray:
    w = np.exp(logw - logw.max())
    w /= w.sum()
    # rejected moves duplicate states; collapse is judged on the mass of the
    # heaviest distinct statistic value, not of a single trace row
    _, inverse = np.unique(t_rows, axis=0, return_inverse=True)
    top = float(np.bincount(inverse, weights=w).max())
    if top > MAX_WEIGHT:
        raise DegenerateWeights(
            f"heaviest state carries {top:.3f} > {MAX_WEIGHT} of the weight; "
            "target is too far from the reference chain")
    return w


def _comparable_samples(chain: ChainResult, grams) -> np.ndarray:
    """Statistic draws in units comparable to the observed statistic."""
    spec = chain.spec
    if spec.kind == "ar_intermediate":
        q = getattr(chain, "_quad", None)
        if q is None:
            q = ar_quadratics(spec, chain.t, grams)
            chain._quad = q
        return q
    return chain.t1


def _comparable_observed(spec_target: DensitySpec, grams) -> float:
    if spec_target.kind == "ar_intermediate":
        t_full = spec_target.basis @ spec_target.t_obs
        return float(t_full @ as_grams(grams).ztz_solve(t_full))
    return float(spec_target.t_obs[0])


def _pivot_detail(chain, spec_target, grams, observed=None):
    logw = log_weights(chain, spec_target)
    w = _normalized_weights(logw, chain.t)
    samples = _comparable_samples(chain, grams)
    if observed is None:
        observed = _comparable_observed(spec_target, grams)
    pivot = float(np.sum(w * (samples <= observed)))
    ess = 1.0 / (len(w) * float(np.sum(w ** 2)))
    return pivot, ess


def _rb_terms(chain, spec):
    """Marginalize the scalar statistic out of one gaussian-family spec.

    Given the other blocks, t is exactly Normal: the g factor is Gaussian in
    t and multiplies the statistic's own Gaussian factor. Returns the
    per-draw posterior mean/variance of t and the log of the t-integrated
    (unnormalized) density of the remaining blocks.
    """
    rest = _chain_rest(chain)
    c = rest - spec.k1[:, 0] * spec.t_obs[0]
    w_diag = 1.0 / spec.omega_scale ** 2
    p_g = float(np.sum(spec.k1[:, 0] ** 2 * w_diag))
    b = c @ (spec.k1[:, 0] * w_diag)
    c_wc = (c ** 2) @ w_diag
    q = 1.0 / spec.var_t[0] + p_g
    m = (spec.mu_t[0] / spec.var_t[0] - b) / q
    log_marg = 0.5 * q * m ** 2 - 0.5 * spec.mu_t[0] ** 2 / spec.var_t[0] \
        - 0.5 * c_wc - 0.5 * math.log(q)
    return m, 1.0 / q, log_marg


def _pivot_detail_rb(chain, spec_target, grams, observed=None):
    """Rao-Blackwellized pivot for scalar gaussian-family specs.

    Replaces the indicator with the conditional Normal CDF of t given the
    other blocks and reweights with the t-marginalized density ratio;
    estimates the same functional as the plain pivot with far less Monte
    Carlo noise, and smoothly in the null value.
    """
    from scipy.special import ndtr

    m_t, v_t, marg_t = _rb_terms(chain, spec_target)
    _, _, marg_r = _rb_terms(chain, chain.spec)
    w = _normalized_weights(marg_t - marg_r,
                            np.column_stack([chain.beta, chain.u_inactive]))
    if observed is None:
        observed = float(spec_target.t_obs[0])
    pivot = float(np.sum(w * ndtr((observed - m_t) / np.sqrt(v_t))))
    ess = 1.0 / (len(w) * float(np.sum(w ** 2)))
    return pivot, ess


def _best_pivot(chain, spec_target, grams, observed=None):
    if spec_target.kind != "ar_intermediate" and spec_target.family == "gaussian":
        return _pivot_detail_rb(chain, spec_target, grams, observed)
    return _pivot_detail(chain, spec_target, grams, observed)


def pivot_at(chain: ChainResult, spec_target: DensitySpec, grams,
             observed: float | None = None) -> float:
    """Self-normalized importance-sampling estimate of P(T <= observed) under
    the target-null conditional law, using the chain's reference draws."""
    return _pivot_detail(chain, spec_target, grams, observed)[0]


# -- interval inversion ------------------------------------------------------

class _PivotSearch:
    """Pivot evaluations against the nearest of up to ``max_refs`` reference chains."""

    def __init__(self, grams, sel, kind, cfg, max_refs=3):
        self.grams = grams
        self.sel = sel
        self.kind = kind
        self.cfg = cfg
        self.max_refs = max_refs      # cap on degenerate-weight retries
        self.refs: list[tuple[float, ChainResult]] = []
        self.min_ess = 1.0
        self.n_evals = 0

    def add_ref(self, beta_ref: float, boost: int = 1) -> ChainResult:
        cfg = with_seed(self.cfg, self.cfg.seed + len(self.refs))
        if boost > 1:
            from dataclasses import replace as _replace
            cfg = _replace(cfg, samples=boost * cfg.samples,
                           burnin=2 * cfg.burnin)
        spec = build_density(self.grams, self.sel, beta_ref, self.kind)
        chain = run_chain(spec, cfg)
        self.refs.append((beta_ref, chain))
        return chain

    def pivot(self, beta0: float) -> float:
        spec_t = build_density(self.grams, self.sel, beta0, self.kind)
        order = sorted(range(len(self.refs)),
                       key=lambda i: abs(self.refs[i][0] - beta0))
        for i in order:
            try:
                p, ess = _best_pivot(self.refs[i][1], spec_t, self.grams)
            except DegenerateWeights:
                continue
            self.min_ess = min(self.min_ess, ess)
            self.n_evals += 1
            return p
        if len(self.refs) >= self.max_refs:
            raise DegenerateWeights(
                f"weights collapsed at beta0={beta0:.4g} with "
                f"{len(self.refs)} references")
        chain = self.add_ref(beta0)
        p, ess = _best_pivot(chain, spec_t, self.grams)
        self.min_ess = min(self.min_ess, ess)
        self.n_evals += 1
        return p

    @property
    def accept_rates(self):
        return [(round(c.accept_t, 4), round(c.accept_coef, 4))
                for _, c in self.refs]


def _expand_until(search, center, start, direction, predicate, label):
    """Double the offset from center until predicate(pivot) holds."""
    x = start
    last = None
    for _ in range(MAX_EXPAND):
        last = search.pivot(x)
        if predicate(last):
            return x, last
        x = center + 2.0 * (x - center) if x != center else center + direction
    raise BracketNotFound(
        f"no {label} bracket after {MAX_EXPAND} expansions (last pivot {last})",
        last_pivots={label: last})


def _bisect_decreasing(search, target, lo, hi, tol=PIVOT_TOL):
    """Find b with pivot(b) ~ target for a non-increasing pivot on [lo, hi]."""
    a, b = lo, hi
    x = 0.5 * (a + b)
    for _ in range(MAX_BISECT):
        x = 0.5 * (a + b)
        p = search.pivot(x)
        if abs(p - target) <= tol:
            return x
        if p > target:
            a = x
        else:
            b = x
    return x


def _refine_endpoint(search, target, candidate, width):
    """Re-solve pivot(b) = target in a small bracket around ``candidate``
    using a fresh reference chain placed there."""
    search.add_ref(candidate, boost=3)
    w = 0.2 * width
    lo, hi = candidate - w, candidate + w
    p_lo, p_hi = search.pivot(lo), search.pivot(hi)
    if not (p_lo >= target >= p_hi):
        return candidate  # candidate already inside the local noise band
    return _bisect_decreasing(search, target, lo, hi, tol=0.5 * PIVOT_TOL)


def selective_interval(data, sel: SelectionResult, kind: str = "tsls_stat",
                       level: float = 0.95, cfg: SamplerConfig | None = None,
                       max_refs: int = 3) -> InferenceResult:
    """Confidence interval for the exposure effect conditional on selection.

    For the TSLS statistic and estimator the equal-tailed pivot is inverted:
    the endpoints solve pivot(b) = 1 - pi/2 and pivot(b) = pi/2. The AR
    pivot is not monotone in the null value, so the one-sided AR test is
    inverted instead: the interval is the set where its right-tail p-value
    stays above pi, found by the same expansion-plus-bisection search.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0,1), got {level}")
    grams = as_grams(data)
    cfg = cfg or SamplerConfig()
    pi = 1.0 - level
    beta_ref = tsls_estimate(grams, sel.E)
    naive = naive_interval(grams, sel.E, level, "tsls")
    half = max(naive.length / 2.0, 1e-8 * (1.0 + abs(beta_ref)))

    search = _PivotSearch(grams, sel, kind, cfg, max_refs=max_refs)
    search.add_ref(beta_ref)

    if kind in ("tsls_stat", "tsls_est"):
        lo_target, hi_target = 1.0 - pi / 2.0, pi / 2.0
        lo, _ = _expand_until(search, beta_ref, beta_ref - 4 * half, -abs(half),
                              lambda p: p >= lo_target, "lower")
        hi, _ = _expand_until(search, beta_ref, beta_ref + 4 * half, abs(half),
                              lambda p: p <= hi_target, "upper")
        ci_lo = _bisect_decreasing(search, lo_target, lo, hi)
        ci_hi = _bisect_decreasing(search, hi_target, ci_lo, hi)
        # refine each endpoint against a reference sampled at the endpoint
        # itself, where the importance weights are near one
        width = max(ci_hi - ci_lo, 1e-12)
        ci_lo = _refine_endpoint(search, lo_target, ci_lo, width)
        ci_hi = _refine_endpoint(search, hi_target, ci_hi, width)
    else:
        ci_lo, ci_hi = _invert_ar(search, beta_ref, half, pi)

    chain0 = search.refs[0][1]
    diagnostics = {
        "accept_rates": search.accept_rates,
        "min_ess_fraction": round(search.min_ess, 6),
        "n_pivot_evals": search.n_evals,
        "n_references": len(search.refs),
        "box_reject_rate": chain0.box_reject_rate,
        "naive_interval": [naive.lower, naive.upper],
    }
    return InferenceResult(
        pvalue=None, ci_lower=float(min(ci_lo, ci_hi)),
        ci_upper=float(max(ci_lo, ci_hi)), level=level,
        n_samples=chain0.n_samples, reference_beta=float(beta_ref),
        kind=kind, null_value=None, diagnostics=diagnostics)


def _invert_ar(search, beta_ref, half, pi):
    """Endpoints where the right-tail AR p-value crosses the level pi."""

    def p_right(b0):
        return 1.0 - search.pivot(b0)

    p_ref = p_right(beta_ref)
    if p_ref < pi:
        raise BracketNotFound(
            f"AR p-value at the reference is already {p_ref:.4f} < {pi:.4f}",
            last_pivots={"reference": p_ref})
    lo = beta_ref - 4 * half
    for _ in range(MAX_EXPAND):
        if p_right(lo) < pi:
            break
        lo = beta_ref + 2.0 * (lo - beta_ref)
    else:
        raise BracketNotFound("no lower AR bracket", last_pivots=None)
    hi = beta_ref + 4 * half
    for _ in range(MAX_EXPAND):
        if p_right(hi) < pi:
            break
        hi = beta_ref + 2.0 * (hi - beta_ref)
    else:
        raise BracketNotFound("no upper AR bracket", last_pivots=None)

    def bisect(a, b, inside, outside):
        # p_right >= pi at `inside`, < pi at `outside`
        for _ in range(MAX_BISECT):
            x = 0.5 * (inside + outside)
            if abs(p_right(x) - pi) <= PIVOT_TOL:
                return x
            if p_right(x) >= pi:
                inside = x
            else:
                outside = x
        return 0.5 * (inside + outside)

    return bisect(lo, beta_ref, beta_ref, lo), bisect(beta_ref, hi, beta_ref, hi)


def conditional_pvalue_at(data, sel: SelectionResult, kind: str, null_value: float,
                          cfg: SamplerConfig | None = None,
                          tail: str | None = None):
    """Sample the conditional null law at ``null_value`` and return (pvalue, chain)."""
    grams = as_grams(data)
    spec = build_density(grams, sel, null_value, kind)
    chain = run_chain(spec, cfg or SamplerConfig())
    samples = _comparable_samples(chain, grams)
    observed = _comparable_observed(spec, grams)
    if tail is None:
        tail = "right" if kind == "ar_intermediate" else "two-sided"
    return conditional_pvalue(samples, observed, tail), chain


def conditional_inference(data, sel: SelectionResult, kind: str = "tsls_stat",
                          null_value: float = 0.0, level: float = 0.95,
                          cfg: SamplerConfig | None = None,
                          tail: str | None = None) -> InferenceResult:
    """P-value at one null value plus the selective confidence interval."""
    cfg = cfg or SamplerConfig()
    pvalue, chain = conditional_pvalue_at(data, sel, kind, null_value, cfg, tail)
    result = selective_interval(data, sel, kind, level, cfg)
    result.pvalue = float(pvalue)
    result.null_value = float(null_value)
    result.diagnostics["null_chain_accept"] = (round(chain.accept_t, 4),
                                               round(chain.accept_coef, 4))
    return result
