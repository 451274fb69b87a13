"""Synthetic multi-instrument registry with known ground truth.

The generator draws true latent trajectories from a linear mixed model
(optionally with a treatment-switch slope), emits ordinal item scores per
instrument through monotone-positive loadings and logistic cutpoints, and
assigns instruments by age windows so that visits carry overlapping subsets
of instruments. It exists to verify the pipeline, not to model any disease.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import mlmm, vae
from .dataio import Dataset, IngestRules, Observation, Patient, apply_filters
from .errors import GenerationError, ValidationError
from .training import TrainedModel
from .vae import InstrumentSchema, ItemSpec


@dataclass(frozen=True)
class InstrumentConfig:
    schema: InstrumentSchema
    age_window: tuple[float, float]
    use_prob: float = 1.0
    loading_scale: float = 2.0


@dataclass(frozen=True)
class GeneratorConfig:
    """Everything the registry generator needs, including the true model."""

    n_patients: int
    instruments: tuple[InstrumentConfig, ...]
    d_true: int = 2
    switch_effect: float = 0.0           # latent slope change per year after the switch
    treatments: tuple[str, ...] = ("A",)
    baseline_age: tuple[float, float] = (0.5, 8.0)
    followup: tuple[float, float] = (4.0, 8.0)
    visit_gap: tuple[float, float] = (0.25, 0.45)
    switch_frac: tuple[float, float] = (0.35, 0.65)
    phi_true: tuple[float, ...] = (0.4, 0.05, 0.05)   # per random column, shared across dims
    sigma_true: float = 0.15
    age_slope: float = -0.25              # latent drift per standardized-age unit
    sev_loading: float = 0.6
    missing_prob: float = 0.02
    flag_offset: float = -4.0
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1 or not self.instruments:
            raise ValidationError("generator needs patients and instruments")
        if min(self.phi_true) <= 0 or self.sigma_true <= 0:
            raise ValidationError("true variances must be positive")


@dataclass
class GroundTruth:
    """True latent state per patient; stored beside the dataset, never read by fits."""

    d_true: int
    switch_effect: float
    latents: dict[str, np.ndarray]        # (m_i, d_true)
    random_effects: dict[str, np.ndarray]
    loadings: dict[str, np.ndarray]       # per instrument (n_items, d_true)


def _default_items(rng: np.random.Generator, n_items: int, flag_frac: float = 0.0,
                   unofficial: int = 0) -> tuple[ItemSpec, ...]:
    """Random item specs; the last ``unofficial`` items sit outside the official score."""
    items = []
    for j in range(n_items):
        levels = int(rng.integers(2, 7))
        has_flag = bool(rng.random() < flag_frac)
        items.append(ItemSpec(levels, has_flag, official=j < n_items - unofficial))
    return tuple(items)


def desk_config(n_patients: int = 60, d_true: int = 2, switch_effect: float = 0.0,
                seed: int = 0, n_instruments: int = 2) -> GeneratorConfig:
    """Small two-instrument setup for fast calibration studies."""
    rng = np.random.default_rng(seed + 90210)
    instruments = []
    windows = [(0.0, 99.0), (0.0, 99.0), (0.0, 6.0), (3.0, 99.0), (0.0, 10.0)]
    for i in range(n_instruments):
        schema = InstrumentSchema(f"inst{i}", _default_items(rng, 6))
        instruments.append(InstrumentConfig(schema, windows[i % len(windows)], use_prob=0.9))
    return GeneratorConfig(n_patients=n_patients, instruments=tuple(instruments),
                           d_true=d_true, switch_effect=switch_effect, seed=seed)


def benchmark_config(n_patients: int = 150, d_true: int = 2, switch_effect: float = 0.35,
                     seed: int = 0) -> GeneratorConfig:
    """Shipped three-instrument benchmark: one infant-window instrument, two broad ones."""
    rng = np.random.default_rng(seed + 4711)
    infant = InstrumentSchema("infant_motor", _default_items(rng, 6, flag_frac=0.3))
    gross = InstrumentSchema("gross_motor", _default_items(rng, 8, unofficial=1))
    fine = InstrumentSchema("fine_motor", _default_items(rng, 7))
    instruments = (
        InstrumentConfig(infant, (0.0, 4.0), use_prob=0.95),
        InstrumentConfig(gross, (1.5, 99.0), use_prob=0.9),
        InstrumentConfig(fine, (0.0, 99.0), use_prob=0.85),
    )
    return GeneratorConfig(n_patients=n_patients, instruments=instruments,
                           d_true=d_true, switch_effect=switch_effect, seed=seed)


def paper_scale_config(seed: int = 0) -> GeneratorConfig:
    """Five instruments with cohort shape matching the reference registry scale."""
    rng = np.random.default_rng(seed + 777)
    sizes = [("upper_limb", 21, (4.0, 99.0)), ("gross_motor", 34, (3.0, 99.0)),
             ("infant_neuro", 16, (0.0, 4.5)), ("milestones", 11, (0.0, 7.0)),
             ("daily_function", 13, (9.0, 99.0))]
    instruments = []
    for name, n_items, window in sizes:
        schema = InstrumentSchema(name, _default_items(rng, n_items, flag_frac=0.2))
        instruments.append(InstrumentConfig(schema, window, use_prob=0.75))
    return GeneratorConfig(n_patients=522, instruments=tuple(instruments),
                           d_true=2, switch_effect=0.3, treatments=("A", "B"),
                           baseline_age=(0.2, 12.0), followup=(4.5, 7.5), seed=seed)


def _make_loadings(rng: np.random.Generator, schema: InstrumentSchema, d_true: int,
                   scale: float) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Monotone-positive latent-to-location maps plus item offsets and cutpoints."""
    w = rng.uniform(0.3, 1.0, size=(schema.n_items, d_true)) * scale / math.sqrt(d_true)
    offsets = rng.uniform(-0.6, 0.6, size=schema.n_items)
    cutpoints = []
    for item in schema.items:
        c = item.levels
        span = rng.uniform(1.8, 2.6)
        cutpoints.append(np.linspace(-span, span, c - 1))
    return w, offsets, cutpoints


def _sample_ordinal(rng, kappa: np.ndarray, loc: float) -> int:
    u = rng.logistic(loc=loc)
    return int(np.sum(kappa < u))


def generate_registry(config: GeneratorConfig,
                      rules: IngestRules | None = None) -> tuple[Dataset, GroundTruth, dict]:
    """Generate a cohort, apply the standard ingestion filters, return ground truth.

    The dataset never contains ground-truth fields; they live in the separate
    :class:`GroundTruth` object (and sidecar file when written by the CLI).
    """
    rng = np.random.default_rng(config.seed)
    d = config.d_true
    q = 3  # random intercept, pre-slope, post-slope
    phi = np.tile(np.asarray(config.phi_true), d)
    inst_cfgs = list(config.instruments)
    loadings, offsets, cutpoints = {}, {}, {}
    for ic in inst_cfgs:
        w, off, cuts = _make_loadings(rng, ic.schema, d, ic.loading_scale)
        loadings[ic.schema.name] = w
        offsets[ic.schema.name] = off
        cutpoints[ic.schema.name] = cuts

    age_center = float(np.mean(config.baseline_age)) + float(np.mean(config.followup)) / 2.0
    age_scale = max((config.baseline_age[1] - config.baseline_age[0]) / 2.0, 1.0)

    patients = []
    truth_latents, truth_ranef = {}, {}
    for i in range(config.n_patients):
        pid = f"P{i:04d}"
        age0 = rng.uniform(*config.baseline_age)
        sex = float(rng.integers(0, 2))
        sev = float(rng.standard_normal())
        followup = rng.uniform(*config.followup)
        times = [0.0]
        while times[-1] < followup:
            times.append(times[-1] + rng.uniform(*config.visit_gap))
        times = np.asarray(times[:-1] if times[-1] > followup else times)
        t_switch = rng.uniform(config.switch_frac[0] * followup, config.switch_frac[1] * followup)
        treatment = str(config.treatments[int(rng.integers(0, len(config.treatments)))])
        dt = times - t_switch
        post = np.maximum(0.0, dt)
        pre = np.minimum(0.0, dt)
        u = rng.standard_normal(q * d) * np.sqrt(phi)
        U = u.reshape((q, d), order="F")
        T = np.column_stack([np.ones_like(times), pre, post])
        age_std = (age0 + times - age_center) / age_scale
        Z = np.zeros((times.size, d))
        for dim in range(d):
            Z[:, dim] = (config.age_slope * age_std
                         + config.sev_loading * sev
                         + config.switch_effect * post
                         + T @ U[:, dim]
                         + rng.standard_normal(times.size) * math.sqrt(config.sigma_true))
        observations = {}
        for vi, t in enumerate(times):
            age_t = age0 + t
            avail = [ic for ic in inst_cfgs
                     if ic.age_window[0] <= age_t <= ic.age_window[1] and rng.random() < ic.use_prob]
            if not avail:
                # guarantee at least one instrument per visit
                gaps = [max(ic.age_window[0] - age_t, age_t - ic.age_window[1], 0.0)
                        for ic in inst_cfgs]
                avail = [inst_cfgs[int(np.argmin(gaps))]]
            for ic in avail:
                schema = ic.schema
                name = schema.name
                locs = offsets[name] + loadings[name] @ Z[vi]
                levels = np.zeros(schema.n_items, dtype=int)
                missing = rng.random(schema.n_items) < config.missing_prob
                cannot = np.zeros(schema.n_items, dtype=bool)
                for j, item in enumerate(schema.items):
                    if missing[j]:
                        continue
                    if item.has_flag and rng.random() < expit(config.flag_offset - locs[j]):
                        cannot[j] = True
                        continue
                    levels[j] = _sample_ordinal(rng, cutpoints[name][j], locs[j])
                observations[(vi, name)] = Observation(levels, missing, cannot)
        patients.append(Patient(pid, age0, {"sex": sex, "sev": sev}, t_switch,
                                treatment, times, observations))
        truth_latents[pid] = Z
        truth_ranef[pid] = U

    dataset = Dataset({ic.schema.name: ic.schema for ic in inst_cfgs}, patients,
                      ("sex", "sev"), tuple(config.treatments))
    try:
        filtered, counts = apply_filters(dataset, rules or IngestRules())
    except Exception as exc:
        raise GenerationError(f"no patient passes the cohort filters: {exc}")
    all_times = {p.pid: p.visits for p in patients}
    kept_latents, kept_ranef = {}, {}
    for pat in filtered.patients:
        # filters may drop visits; align the stored truth to the kept grid
        keep_rows = np.searchsorted(all_times[pat.pid], pat.visits)
        kept_latents[pat.pid] = truth_latents[pat.pid][keep_rows]
        kept_ranef[pat.pid] = truth_ranef[pat.pid]
    truth = GroundTruth(d, config.switch_effect, kept_latents, kept_ranef, loadings)
    return filtered, truth, counts


def generate_null_from_model(model: TrainedModel, dataset: Dataset,
                             rng: np.random.Generator) -> Dataset:
    """Regenerate item scores from counterfactual (no-switch) latent predictions.

    Visit times, instrument availability, missing masks, covariates and
    switch timestamps are preserved exactly; only the item scores are
    resampled from the decoders at the counterfactual latent prediction, so a
    refit on the output faces data without a switch effect.
    """
    patients = {p.pid: p for p in dataset.patients}
    new_patients = []
    for pid in sorted(patients):
        pat = patients[pid]
        cf = mlmm.build_design(pat, model.spec, model.stats, counterfactual=True)
        z_cf = mlmm.predict(model.mm, model.blups[pid], cf)
        new_obs = {}
        for (vi, name), obs in sorted(pat.observations.items()):
            schema = model.schemas[name]
            out = vae.decode_ordinal(schema, model.vae[name], z_cf[vi])
            levels = np.zeros(schema.n_items, dtype=int)
            cannot = np.zeros(schema.n_items, dtype=bool)
            flag_pos = {j: r for r, j in enumerate(schema.flagged_idx)}
            for j, item in enumerate(schema.items):
                if obs.missing[j]:
                    continue
                if item.has_flag and rng.random() < expit(out.flag_logits[flag_pos[j]]):
                    cannot[j] = True
                    continue
                levels[j] = _sample_ordinal(rng, out.cutpoints[j], out.locations[j])
            new_obs[(vi, name)] = Observation(levels, obs.missing.copy(), cannot)
        new_patients.append(Patient(pat.pid, pat.baseline_age, dict(pat.covariates),
                                    pat.t_switch, pat.switch_to, pat.visits.copy(),
                                    new_obs, pat.t_second_switch))
    return Dataset(dataset.schemas, new_patients, dataset.covariate_names,
                   dataset.treatments, dataset.standardization)
