"""Knockoff negative controls and the bootstrap null for likelihood-ratio tests.

The latent responses come out of a fit that jointly optimized the encoders
and the mixed model, so the chi-squared reference for a likelihood-ratio
statistic can be badly calibrated. The procedure here re-runs the whole
pipeline many times with freshly initialized networks and freshly drawn
knockoff covariates (independent of the data by construction, so their
coefficient block is null with probability one), collects the resulting LR
statistics, and calibrates p-values against that empirical null.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import mlmm, training
from .dataio import Dataset
from .errors import ConditioningError, OptimizationFailure, ValidationError
from .mlmm import MixedModelData, ModelSpec
from .training import TrainConfig, TrainedModel

LR_TOLERANCE = -1e-8


@dataclass(frozen=True)
class KnockoffSpec:
    """How many knockoff columns to draw and at which level.

    Patient-level knockoffs repeat one standard-normal draw across a
    patient's visits; visit-level knockoffs are redrawn at every visit.
    """

    k: int = 1
    level: str = "patient"

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("need at least one knockoff column")
        if self.level not in ("patient", "visit"):
            raise ValidationError(f"unknown knockoff level {self.level!r}")


def gen_knockoffs(spec: KnockoffSpec, patients, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Per-patient (m_i, k) standard-normal knockoff matrices, independent of all data."""
    out = {}
    for pat in patients:
        m = pat.n_visits
        if spec.level == "patient":
            row = rng.standard_normal(spec.k)
            out[pat.pid] = np.tile(row, (m, 1))
        else:
            out[pat.pid] = rng.standard_normal((m, spec.k))
    return out


def lr_statistic(loglik_full: float, loglik_reduced: float) -> float:
    """Lambda = 2 (L_full - L_reduced), clamped at zero within numerical noise."""
    lam = 2.0 * (loglik_full - loglik_reduced)
    if lam < LR_TOLERANCE:
        raise OptimizationFailure(
            f"full model fit worse than reduced (Lambda = {lam:.3e}); optimization failed")
    return max(lam, 0.0)


@dataclass
class Ecdf:
    """Right-continuous empirical CDF with quantile lookup by inversion."""

    sorted_samples: np.ndarray

    def __call__(self, x) -> float | np.ndarray:
        return np.searchsorted(self.sorted_samples, x, side="right") / self.sorted_samples.size

    def quantile(self, q: float) -> float:
        if not 0.0 < q <= 1.0:
            raise ValidationError("quantile level must be in (0, 1]")
        n = self.sorted_samples.size
        idx = int(np.ceil(q * n)) - 1
        return float(self.sorted_samples[max(idx, 0)])


def empirical_cdf(lam: np.ndarray) -> Ecdf:
    lam = np.asarray(lam, dtype=float)
    if lam.size == 0:
        raise ValidationError("empirical CDF needs at least one sample")
    return Ecdf(np.sort(lam))


def p_value(lam_obs: float, lam_null: np.ndarray) -> float:
    """(1 + #{Lambda_b >= Lambda_obs}) / (|B| + 1); ties count, never zero."""
    lam_null = np.asarray(lam_null, dtype=float)
    if lam_null.size == 0:
        raise ValidationError("p-value needs a nonempty null sample")
    return float((1 + np.sum(lam_null >= lam_obs)) / (lam_null.size + 1))


@dataclass
class BootstrapNull:
    """LR statistics from the replicate runs plus bookkeeping for reproducibility."""

    lam: np.ndarray
    n_failed: int
    failures: list[str]
    master_seed: int
    replicate_seeds: list[int]

    @property
    def ecdf(self) -> Ecdf:
        return empirical_cdf(self.lam)

    def summary(self) -> dict:
        q = np.quantile(self.lam, [0.05, 0.25, 0.5, 0.75, 0.95])
        return {"n": int(self.lam.size), "mean": float(self.lam.mean()),
                "sd": float(self.lam.std(ddof=1)) if self.lam.size > 1 else 0.0,
                "q05": float(q[0]), "q25": float(q[1]), "median": float(q[2]),
                "q75": float(q[3]), "q95": float(q[4]), "n_failed": self.n_failed}


@dataclass
class LrTestResult:
    block: str
    lam_obs: float
    rd: int
    p: float
    alpha: float
    threshold: float
    null: BootstrapNull
    effect_kind: str = "fixed"

    @property
    def significant(self) -> bool:
        return self.lam_obs > self.threshold


# ---------------------------------------------------------------------------
# replicate machinery
# ---------------------------------------------------------------------------

def _fit_full_reduced_fixed(model: TrainedModel, drop_idx) -> float:
    """LR statistic for a fixed-effect block on the model's final latents."""
    data = model.mixed_data()
    full = mlmm.fit(data, init=model.mm, method="ML",
                    lbfgs_initial_step=model.config.lbfgs_initial_step)
    reduced_designs = [mlmm.drop_columns(dp, drop_idx) for dp in model.designs]
    red_data = MixedModelData(reduced_designs, data.Z, list(model.pids))
    reduced = mlmm.fit(red_data, init=model.mm, method="ML",
                       lbfgs_initial_step=model.config.lbfgs_initial_step)
    return lr_statistic(full.loglik, reduced.loglik)


def _fit_full_reduced_random(model: TrainedModel, n_drop: int) -> float:
    """LR statistic for the last ``n_drop`` random-effect columns."""
    data = model.mixed_data()
    full = mlmm.fit(data, init=model.mm, method="ML",
                    lbfgs_initial_step=model.config.lbfgs_initial_step)
    reduced_designs = []
    for dp in model.designs:
        q = dp.T.shape[1]
        reduced_designs.append(
            mlmm.DesignPair(dp.X, dp.T[:, :q - n_drop], dp.times, dp.dt))
    red_data = MixedModelData(reduced_designs, data.Z, list(model.pids))
    reduced = mlmm.fit(red_data, init=None, method="ML",
                       lbfgs_initial_step=model.config.lbfgs_initial_step)
    return lr_statistic(full.loglik, reduced.loglik)


def _replicate(dataset: Dataset, spec: ModelSpec, config: TrainConfig,
               kspec: KnockoffSpec, seed_seq: np.random.SeedSequence,
               effect_kind: str) -> float:
    """One bootstrap replicate: fresh VAE init, fresh knockoffs, full re-fit, LR."""
    rng = np.random.default_rng(seed_seq)
    patients = sorted(dataset.patients, key=lambda p: p.pid)
    w = gen_knockoffs(kspec, patients, rng)
    if effect_kind == "fixed":
        model = training.fit_joint(dataset, spec, config, rng=rng, w_fixed=w)
        drop_idx = mlmm.block_columns(model.fixed_labels, "knockoff")
        return _fit_full_reduced_fixed(model, drop_idx)
    model = training.fit_joint(dataset, spec, config, rng=rng, w_random=w)
    return _fit_full_reduced_random(model, kspec.k)


def _replicate_task(args):
    idx, dataset, spec, config, kspec, seed_seq, effect_kind = args
    try:
        return idx, _replicate(dataset, spec, config, kspec, seed_seq, effect_kind), None
    except (ConditioningError, OptimizationFailure, FloatingPointError,
            ValueError, np.linalg.LinAlgError) as exc:
        return idx, None, f"replicate {idx}: {type(exc).__name__}: {exc}"


def resolve_jobs(n_jobs: int | None, n_tasks: int) -> int:
    if n_jobs is None:
        env = os.environ.get("LATMIX_JOBS")
        n_jobs = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(n_jobs, n_tasks))


def bootstrap_null(dataset: Dataset, spec: ModelSpec, config: TrainConfig,
                   kspec: KnockoffSpec, n_replicates: int, seed: int,
                   effect_kind: str = "fixed", n_jobs: int | None = None,
                   max_failure_frac: float = 0.05) -> BootstrapNull:
    """Empirical null distribution of the LR statistic from knockoff replicates.

    Each replicate reinitializes the VAE parameters and redraws the knockoff
    block (the data itself is never resampled), reruns the alternating fit
    with the knockoffs in the design, and records the LR statistic of the
    knockoff block. Replicates run as independent jobs with seeds derived
    from the master seed, so results do not depend on worker scheduling.
    """
    if n_replicates < 1:
        raise ValidationError("need at least one bootstrap replicate")
    master = np.random.SeedSequence(seed)
    children = master.spawn(n_replicates)
    tasks = [(b, dataset, spec, config, kspec, children[b], effect_kind)
             for b in range(n_replicates)]
    n_jobs = resolve_jobs(n_jobs, n_replicates)
    results: list[tuple] = []
    if n_jobs == 1:
        for t in tasks:
            results.append(_replicate_task(t))
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_replicate_task, tasks, chunksize=1))
    results.sort(key=lambda r: r[0])
    lam, failures = [], []
    for _, value, err in results:
        if err is None:
            lam.append(value)
        else:
            failures.append(err)
    if len(failures) > max_failure_frac * n_replicates:
        raise RuntimeError(
            f"{len(failures)} of {n_replicates} bootstrap replicates failed: {failures[:3]}")
    return BootstrapNull(np.asarray(lam), len(failures), failures, seed,
                         [c.entropy for c in children])


def observed_lr(dataset: Dataset, spec: ModelSpec, config: TrainConfig, block: str,
                seed: int, effect_kind: str = "fixed",
                kspec: KnockoffSpec | None = None) -> tuple[float, int, TrainedModel]:
    """LR statistic of a named covariate block on the trained pipeline.

    For a real block the pipeline trains on the spec'd design and the
    reduced model drops the block's columns (age interactions included).
    For ``block='knockoff'`` the pipeline trains with the knockoff columns in
    the design, mirroring one bootstrap replicate.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if block == "knockoff":
        if kspec is None:
            raise ValidationError("testing a knockoff block requires a KnockoffSpec")
        patients = sorted(dataset.patients, key=lambda p: p.pid)
        w = gen_knockoffs(kspec, patients, rng)
        if effect_kind == "fixed":
            model = training.fit_joint(dataset, spec, config, rng=rng, w_fixed=w)
            idx = mlmm.block_columns(model.fixed_labels, "knockoff")
            return _fit_full_reduced_fixed(model, idx), len(idx) * config.d, model
        model = training.fit_joint(dataset, spec, config, rng=rng, w_random=w)
        return _fit_full_reduced_random(model, kspec.k), kspec.k * config.d, model
    model = training.fit_joint(dataset, spec, config, rng=rng)
    if effect_kind != "fixed":
        raise ValidationError("random-effect tests are only supported for knockoff blocks")
    idx = mlmm.block_columns(model.fixed_labels, block)
    return _fit_full_reduced_fixed(model, idx), len(idx) * config.d, model


def lr_test(dataset: Dataset, spec: ModelSpec, config: TrainConfig, block: str,
            level: str = "patient", k: int | None = None, n_replicates: int = 1000,
            alpha: float = 0.05, seed: int = 0, effect_kind: str = "fixed",
            n_jobs: int | None = None) -> LrTestResult:
    """Full knockoff-bootstrap LR test of one covariate block.

    ``k`` defaults to the tested block's column count so the knockoff null
    matches the hypothesis dimension.
    """
    lam_obs, rd, model = observed_lr(dataset, spec, config, block, seed,
                                     effect_kind=effect_kind,
                                     kspec=KnockoffSpec(k or 1, level) if block == "knockoff" else None)
    if k is None:
        k = rd // config.d
    kspec = KnockoffSpec(k, level)
    null = bootstrap_null(dataset, spec, config, kspec, n_replicates, seed + 1,
                          effect_kind=effect_kind, n_jobs=n_jobs)
    return LrTestResult(block, lam_obs, rd, p_value(lam_obs, null.lam), alpha,
                        null.ecdf.quantile(1.0 - alpha), null, effect_kind)
