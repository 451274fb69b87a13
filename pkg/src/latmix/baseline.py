"""Per-instrument sum-score mixed models and a correlated-effects GLS meta-analysis.

The comparison pipeline: each instrument gets its own univariate LMM on
official sum scores (same fixed and random effects as the latent model, plus
an intercept since sums are not centered), eligibility is judged per
instrument, a patient-level bootstrap estimates the cross-instrument
covariance of the switch-effect estimates, and generalized least squares
pools them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import mlmm
from .dataio import Dataset, Patient
from .errors import ConditioningError, ValidationError
from .mlmm import FitResult, MixedModelData, ModelSpec


def sum_scores(dataset: Dataset, instrument: str) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-patient (times, official sum scores) where the instrument was observed.

    Missing items contribute zero, consistent with zero-fill imputation.
    """
    schema = dataset.schemas[instrument]
    official = np.array([it.official for it in schema.items])
    out = {}
    for pat in sorted(dataset.patients, key=lambda p: p.pid):
        times, sums = [], []
        for vi in range(pat.n_visits):
            obs = pat.observations.get((vi, instrument))
            if obs is None:
                continue
            times.append(pat.visits[vi])
            sums.append(float(np.sum(np.where(obs.missing, 0, obs.levels)[official])))
        if times:
            out[pat.pid] = (np.asarray(times), np.asarray(sums))
    return out


def _eligible(pat: Patient, times: np.ndarray, min_visits: int, min_pre: int, min_post: int) -> bool:
    if not math.isfinite(pat.t_switch):
        return False
    n_pre = int(np.sum(times < pat.t_switch))
    n_post = int(np.sum(times >= pat.t_switch))
    return times.size >= min_visits and n_pre >= min_pre and n_post >= min_post


@dataclass
class InstrumentFit:
    instrument: str
    n_eligible: int
    fit: FitResult | None
    switch_coef: np.ndarray | None       # one entry per treatment column
    labels: tuple[str, ...]
    skipped_reason: str | None = None


def _instrument_data(dataset: Dataset, instrument: str, spec: ModelSpec,
                     min_visits: int = 4, min_pre: int = 2, min_post: int = 2):
    """Designs and sum-score responses for the patients eligible on this instrument."""
    base_spec = replace(spec, intercept=True)
    scores = sum_scores(dataset, instrument)
    eligible: list[Patient] = []
    times_map = {}
    for pat in sorted(dataset.patients, key=lambda p: p.pid):
        if pat.pid not in scores:
            continue
        times, sums = scores[pat.pid]
        if _eligible(pat, times, min_visits, min_pre, min_post):
            eligible.append(pat)
            times_map[pat.pid] = (times, sums)
    if not eligible:
        return base_spec, [], [], [], []
    stats = mlmm.compute_standardization(eligible, base_spec)
    designs, Z, pids = [], [], []
    for pat in eligible:
        times, sums = times_map[pat.pid]
        designs.append(mlmm.build_design(pat, base_spec, stats, times=times))
        Z.append(sums[:, None])
        pids.append(pat.pid)
    return base_spec, eligible, designs, Z, pids


def fit_instrument_lmm(dataset: Dataset, instrument: str, spec: ModelSpec,
                       min_patients: int = 30, method: str = "ML") -> InstrumentFit:
    """Univariate sum-score LMM for one instrument, or a skip record.

    Eligibility mirrors the cohort rules instrument-specifically: at least
    four assessments with this instrument, two of them before and two after
    the switch. Below ``min_patients`` eligible patients the instrument is
    skipped with a recorded reason.
    """
    base_spec, eligible, designs, Z, pids = _instrument_data(dataset, instrument, spec)
    labels = base_spec.fixed_labels()
    if len(eligible) < min_patients:
        return InstrumentFit(instrument, len(eligible), None, None, labels,
                             f"only {len(eligible)} eligible patients (< {min_patients})")
    data = MixedModelData(designs, Z, pids)
    res = mlmm.fit(data, method=method)
    switch_idx = [i for i, lab in enumerate(labels) if lab.startswith("switch:")]
    coef = res.params.B[switch_idx, 0]
    return InstrumentFit(instrument, len(eligible), res, coef, labels)


def bootstrap_cov(dataset: Dataset, instruments: list[str], spec: ModelSpec,
                  n_replicates: int = 200, seed: int = 0, min_patients: int = 30,
                  max_failure_frac: float = 0.10) -> tuple[np.ndarray, np.ndarray, int]:
    """Patient-level bootstrap covariance of the per-instrument switch effects.

    Returns (covariance, replicate effect matrix, n_dropped); replicates where
    any instrument fails to fit are dropped and counted.
    """
    if len(instruments) < 2:
        raise ValidationError("cross-instrument covariance needs at least two instruments")
    rng = np.random.default_rng(seed)
    n_treat = len(spec.treatments)
    rows = []
    dropped = 0
    patients = sorted(dataset.patients, key=lambda p: p.pid)
    for _ in range(n_replicates):
        idx = rng.integers(0, len(patients), size=len(patients))
        resampled = []
        for r, i in enumerate(idx):
            pat = patients[i]
            resampled.append(replace(pat, pid=f"{pat.pid}#b{r}"))
        boot = Dataset(dataset.schemas, resampled, dataset.covariate_names,
                       dataset.treatments, dataset.standardization)
        effects = np.full(len(instruments) * n_treat, np.nan)
        ok = True
        for li, name in enumerate(instruments):
            try:
                ifit = fit_instrument_lmm(boot, name, spec, min_patients=min_patients)
            except (ConditioningError, np.linalg.LinAlgError):
                ok = False
                break
            if ifit.fit is None or not np.isfinite(ifit.switch_coef).all():
                ok = False
                break
            effects[li * n_treat:(li + 1) * n_treat] = ifit.switch_coef
        if ok:
            rows.append(effects)
        else:
            dropped += 1
    if dropped > max_failure_frac * n_replicates:
        raise RuntimeError(f"{dropped} of {n_replicates} bootstrap replicates failed")
    mat = np.asarray(rows)
    cov = np.cov(mat, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    return cov, mat, dropped


@dataclass
class MetaResult:
    pooled: np.ndarray             # per treatment coordinate
    covariance: np.ndarray
    stat: float                    # global quadratic-form statistic
    p: float | None
    per_instrument: dict[str, np.ndarray]
    ridge_added: bool = False


def meta_gls(effects: np.ndarray, covariance: np.ndarray,
             n_coords: int = 1) -> MetaResult:
    """Fixed-effect GLS pooling of correlated per-instrument effects.

    ``effects`` stacks the per-instrument effect vectors (instrument-major,
    ``n_coords`` entries each). Pooling runs per coordinate with the matching
    sub-covariance; the global statistic is the quadratic form
    effects' C^{-1} effects against the zero-effect null.
    """
    theta = np.asarray(effects, dtype=float).ravel()
    C = np.atleast_2d(np.asarray(covariance, dtype=float))
    if C.shape != (theta.size, theta.size):
        raise ValidationError(f"covariance {C.shape} does not match {theta.size} effects")
    ridge_added = False
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        C = C + 1e-8 * np.eye(theta.size)
        ridge_added = True
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError:
            raise ConditioningError("meta-analysis covariance is singular beyond ridge")
    Cinv = np.linalg.inv(C)
    n_inst = theta.size // n_coords
    pooled = np.empty(n_coords)
    for c in range(n_coords):
        sel = np.arange(c, theta.size, n_coords)
        sub = np.linalg.inv(C[np.ix_(sel, sel)])
        ones = np.ones(n_inst)
        w = sub @ ones
        pooled[c] = float(w @ theta[sel] / (ones @ w))
    stat = float(theta @ Cinv @ theta)
    per_inst = {str(i): theta[i * n_coords:(i + 1) * n_coords] for i in range(n_inst)}
    return MetaResult(pooled, C, stat, None, per_inst, ridge_added)


def calibrate_meta(dataset: Dataset, instruments: list[str], spec: ModelSpec,
                   observed_stat: float, covariance: np.ndarray,
                   n_null: int = 200, seed: int = 1, min_patients: int = 30) -> float:
    """Bootstrap-calibrated p-value for the global statistic.

    Null replicates simulate sum scores from the fitted per-instrument models
    with the switch coefficients zeroed, refit each instrument, and recompute
    the quadratic-form statistic against the observed covariance.
    """
    rng = np.random.default_rng(seed)
    n_treat = len(spec.treatments)
    fitted = []
    for name in instruments:
        base_spec, eligible, designs, Z, pids = _instrument_data(dataset, name, spec)
        ifit = fit_instrument_lmm(dataset, name, spec, min_patients=min_patients)
        if ifit.fit is None:
            raise ValidationError(f"instrument {name} not fittable for calibration")
        labels = base_spec.fixed_labels()
        B0 = ifit.fit.params.B.copy()
        for i, lab in enumerate(labels):
            if lab.startswith("switch:") or lab.startswith("age*switch:"):
                B0[i, :] = 0.0
        fitted.append((name, designs, pids, B0, ifit.fit.params))
    Cinv = np.linalg.inv(covariance)
    switch_rows = _switch_rows(spec)
    null_stats = []
    for _ in range(n_null):
        theta_null = []
        for name, designs, pids, B0, params in fitted:
            Z_sim = []
            phi = params.phi
            sig = params.sigma
            q = designs[0].T.shape[1]
            for dp in designs:
                u = rng.standard_normal(q) * np.sqrt(phi)
                e = rng.standard_normal(dp.X.shape[0]) * math.sqrt(float(sig[0]))
                Z_sim.append((dp.X @ B0[:, 0] + dp.T @ u + e)[:, None])
            data = MixedModelData(designs, Z_sim, list(pids))
            res = mlmm.fit(data, init=params, method="ML")
            theta_null.extend(res.params.B[switch_rows, 0])
        theta_null = np.asarray(theta_null)
        null_stats.append(float(theta_null @ Cinv @ theta_null))
    null_stats = np.asarray(null_stats)
    return float((1 + np.sum(null_stats >= observed_stat)) / (n_null + 1))


def _switch_rows(spec: ModelSpec) -> list[int]:
    labels = replace(spec, intercept=True).fixed_labels()
    return [i for i, lab in enumerate(labels) if lab.startswith("switch:")]
