"""Synthetic-data generation and desk-scale replication studies.

Replications run in a process pool; every replication derives its data,
randomization, and chain seeds from (master seed, config index, replication
index), so study tables are reproducible regardless of scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy.stats import kstest

from .exceptions import IVCondError
from .inference import conditional_pvalue_at, selective_interval
from .iv_core import IVData, ModelParams, naive_interval
from .sampler import SamplerConfig
from .sisvive import (RandomizationSpec, TuningParams, carving_epsilon,
                      carving_omega_scale, default_lambda,
                      solve_randomized_sisvive)


@dataclass(frozen=True)
class SimConfig:
    """Generative and study settings; defaults follow the benchmark design."""

    n: int = 1000
    L: int = 10
    n_invalid: int = 3
    beta_star: float = 1.0
    alpha_invalid: float = 7.0
    gamma_valid: float = 2.5
    gamma_invalid: float = 2.5
    rho: float = 0.8
    replications: int = 300
    seed: int = 0
    statistic: str = "tsls_stat"
    level: float = 0.95
    burnin: int = 5000
    samples: int = 10000
    carving: bool = False   # heavy randomization with matched ridge

    def __post_init__(self):
        if not 0 <= self.n_invalid < self.L:
            raise ValueError("need 0 <= n_invalid < L")
        if abs(self.rho) >= 1:
            raise ValueError("need |rho| < 1")


def model_params(cfg: SimConfig) -> ModelParams:
    alpha = np.zeros(cfg.L)
    alpha[:cfg.n_invalid] = cfg.alpha_invalid
    gamma = np.full(cfg.L, cfg.gamma_valid)
    gamma[:cfg.n_invalid] = cfg.gamma_invalid
    sigma = np.array([[1.0, cfg.rho], [cfg.rho, 1.0]])
    return ModelParams(beta=cfg.beta_star, alpha=alpha, gamma=gamma, sigma=sigma)


def generate(cfg: SimConfig, seed) -> tuple[IVData, ModelParams]:
    """Draw one dataset: standard-Normal instruments, bivariate-Normal errors."""
    params = model_params(cfg)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((cfg.n, cfg.L))
    chol = np.linalg.cholesky(params.sigma)
    errors = rng.standard_normal((cfg.n, 2)) @ chol.T
    d = z @ params.gamma + errors[:, 1]
    y = z @ params.alpha + d * params.beta + errors[:, 0]
    return IVData(y, d, z), params


def _rep_seeds(master: int, config_idx: int, rep: int, count: int):
    ss = np.random.SeedSequence([int(master), int(config_idx), int(rep)])
    return [int(s) for s in ss.generate_state(count, dtype=np.uint32)]


def _individual_defaults(grams, omega_seed, carving=False):
    if carving:
        tuning = TuningParams(lam=default_lambda(grams),
                              epsilon=carving_epsilon(grams))
        rand = RandomizationSpec(scale=carving_omega_scale(grams),
                                 seed=omega_seed)
    else:
        tuning = TuningParams.default(grams)
        rand = RandomizationSpec(seed=omega_seed)
    return tuning, rand


def _run_pvalue_rep(payload):
    cfg, config_idx, rep = payload
    data_seed, omega_seed, chain_seed = _rep_seeds(cfg.seed, config_idx, rep, 3)
    data, params = generate(cfg, data_seed)
    try:
        tuning, rand = _individual_defaults(data.grams, omega_seed, cfg.carving)
        sel = solve_randomized_sisvive(data.grams, tuning, rand)
        scfg = SamplerConfig(burnin=cfg.burnin, samples=cfg.samples, seed=chain_seed)
        # two-sided for the location statistics, right tail for the F-type AR
        pvalue, _ = conditional_pvalue_at(data.grams, sel, cfg.statistic,
                                          cfg.beta_star, scfg, tail=None)
        return {"config": config_idx, "rep": rep, "pvalue": pvalue,
                "n_selected": sel.n_selected,
                "captures_invalid": set(params.invalid_set) <= set(sel.E),
                "failed": ""}
    except IVCondError as exc:
        return {"config": config_idx, "rep": rep, "pvalue": np.nan,
                "n_selected": -1, "captures_invalid": False,
                "failed": type(exc).__name__}


def _run_coverage_rep(payload):
    cfg, config_idx, rep = payload
    data_seed, omega_seed, chain_seed = _rep_seeds(cfg.seed, config_idx, rep, 3)
    data, params = generate(cfg, data_seed)
    out = {"config": config_idx, "rep": rep, "failed": "",
           "captures_invalid": False, "n_selected": -1,
           "cond_lo": np.nan, "cond_hi": np.nan,
           "naive_lo": np.nan, "naive_hi": np.nan}
    try:
        tuning, rand = _individual_defaults(data.grams, omega_seed, cfg.carving)
        sel = solve_randomized_sisvive(data.grams, tuning, rand)
        out["n_selected"] = sel.n_selected
        out["captures_invalid"] = set(params.invalid_set) <= set(sel.E)
        naive = naive_interval(data.grams, sel.E, cfg.level, "tsls")
        scfg = SamplerConfig(burnin=cfg.burnin, samples=cfg.samples, seed=chain_seed)
        cond = selective_interval(data.grams, sel, cfg.statistic, cfg.level, scfg)
        out.update(cond_lo=cond.ci_lower, cond_hi=cond.ci_upper,
                   naive_lo=naive.lower, naive_hi=naive.upper)
    except IVCondError as exc:
        out["failed"] = type(exc).__name__
    return out


def _run_jobs(worker, configs, replications, workers):
    payloads = [(cfg, idx, rep)
                for idx, (_, cfg) in enumerate(configs)
                for rep in range(replications)]
    if workers == 0:
        rows = [worker(p) for p in payloads]
    else:
        max_workers = workers or os.cpu_count() or 1
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            rows = list(pool.map(worker, payloads, chunksize=8))
    detail = pd.DataFrame(rows)
    detail.insert(0, "label", [configs[i][0] for i in detail["config"]])
    return detail


def _uniform_strength_configs(cfg: SimConfig, r_grid):
    return [(float(r), replace(cfg, gamma_valid=float(r), gamma_invalid=float(r)))
            for r in r_grid]


def ecdf_study(cfg: SimConfig, r_grid, workers=None):
    """Conditional p-values under the true effect across instrument strengths.

    Returns (summary, detail): the summary has one row per strength with the
    Kolmogorov-Smirnov distance of the p-value ECDF from Uniform(0,1); the
    detail keeps every replication's p-value for ECDF curves.
    """
    configs = _uniform_strength_configs(cfg, r_grid)
    detail = _run_jobs(_run_pvalue_rep, configs, cfg.replications, workers)
    rows = []
    for label, _ in configs:
        sub = detail[detail["label"] == label]
        ok = sub[sub["failed"] == ""]["pvalue"].to_numpy()
        ks = kstest(ok, "uniform").statistic if len(ok) else np.nan
        rows.append({"r": label, "ks_distance": ks, "n_ok": len(ok),
                     "n_failed": int((sub["failed"] != "").sum()),
                     "capture_rate": float(sub["captures_invalid"].mean())})
    return pd.DataFrame(rows), detail


def coverage_for_configs(configs, replications, workers=None):
    """Coverage/length comparison over explicit (label, SimConfig) pairs.

    Primary coverage columns are restricted to replications whose selected
    set captures every truly invalid instrument (the regime where marginal
    coverage is guaranteed); ``*_all`` columns keep every finished
    replication. Failed replications are excluded and counted.
    """
    detail = _run_jobs(_run_coverage_rep, configs, replications, workers)
    truth = {label: cfg.beta_star for label, cfg in configs}
    rows = []
    for label, _ in configs:
        sub = detail[detail["label"] == label]
        ok = sub[sub["failed"] == ""].copy()
        beta = truth[label]
        cond_cover = (ok["cond_lo"] <= beta) & (beta <= ok["cond_hi"])
        naive_cover = (ok["naive_lo"] <= beta) & (beta <= ok["naive_hi"])
        sel = ok["captures_invalid"].to_numpy(dtype=bool)
        n_sel = int(sel.sum())
        rows.append({
            "r": label,
            "conditional_coverage": float(cond_cover[sel].mean()) if n_sel else np.nan,
            "naive_coverage": float(naive_cover[sel].mean()) if n_sel else np.nan,
            "conditional_length": float((ok["cond_hi"] - ok["cond_lo"])[sel].mean()) if n_sel else np.nan,
            "naive_length": float((ok["naive_hi"] - ok["naive_lo"])[sel].mean()) if n_sel else np.nan,
            "conditional_coverage_all": float(cond_cover.mean()) if len(ok) else np.nan,
            "naive_coverage_all": float(naive_cover.mean()) if len(ok) else np.nan,
            "mc_se": float(np.sqrt(0.95 * 0.05 / n_sel)) if n_sel else np.nan,
            "n_restricted": n_sel,
            "n_ok": len(ok),
            "n_failed": int((sub["failed"] != "").sum()),
        })
    return pd.DataFrame(rows), detail


def coverage_study(cfg: SimConfig, r_grid, workers=None):
    """Conditional vs naive interval coverage across uniform instrument strengths."""
    configs = _uniform_strength_configs(cfg, r_grid)
    return coverage_for_configs(configs, cfg.replications, workers)


def ecdf_curves_long(detail: pd.DataFrame) -> pd.DataFrame:
    """Long-format ECDF curves (r, pvalue, ecdf) from an ecdf_study detail table."""
    frames = []
    for label, sub in detail[detail["failed"] == ""].groupby("label"):
        p = np.sort(sub["pvalue"].to_numpy())
        frames.append(pd.DataFrame({
            "r": label, "pvalue": p,
            "ecdf": np.arange(1, len(p) + 1) / len(p)}))
    return pd.concat(frames, ignore_index=True)
