"""Treatment-switch effect quantification at the item level.

The trained pipeline predicts each patient's latent trajectory twice: once
with the fitted design (factual) and once with every post-switch column
zeroed and the pre-switch slope extended (counterfactual, i.e. the switch
never happened). Both predictions are decoded through every instrument's
decoder and compared as expected item scores; the difference at a fixed
horizon after the switch is the estimated switch effect.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import mlmm, training, vae
from .dataio import Dataset, Observation, Patient
from .errors import ValidationError
from .mlmm import DesignPair, ModelSpec
from .training import TrainConfig, TrainedModel


@dataclass(frozen=True)
class CounterfactualPair:
    """Factual and no-switch designs on a grid that includes the horizon point."""

    factual: DesignPair
    counterfactual: DesignPair
    horizon_row: int


def counterfactual_design(patient, spec: ModelSpec, stats, horizon: float) -> CounterfactualPair:
    """Design matrices on the visit grid extended by t_switch + horizon.

    Pre-switch rows of the two designs are identical; the counterfactual
    zeroes every max(0, dt) column (fixed and random, interactions included)
    and lets the min(0, dt) slope continue linearly past the switch.
    """
    if not math.isfinite(patient.t_switch):
        raise ValidationError(f"patient {patient.pid}: no switch recorded")
    if horizon <= 0:
        raise ValidationError("horizon must be positive")
    t_eval = patient.t_switch + horizon
    times = np.append(np.asarray(patient.visits, dtype=float), t_eval)
    order = np.argsort(times, kind="stable")
    times = times[order]
    horizon_row = int(np.nonzero(order == len(order) - 1)[0][0])
    fact = mlmm.build_design(patient, spec, stats, times=times)
    cf = mlmm.build_design(patient, spec, stats, times=times, counterfactual=True)
    return CounterfactualPair(fact, cf, horizon_row)


def switch_effect(model: TrainedModel, patient, horizon: float = 1.0) -> dict[str, np.ndarray]:
    """Per-item expected-score differences (factual minus counterfactual).

    Both latent predictions at t_switch + horizon are decoded through every
    instrument's decoder; the patient's BLUP comes from the factual fit and
    is applied to both designs.
    """
    pair = counterfactual_design(patient, model.spec, model.stats, horizon)
    blup_i = model.blups[patient.pid]
    params = model.mm
    z_fact = mlmm.predict(params, blup_i, pair.factual)[pair.horizon_row]
    z_cf = mlmm.predict(params, blup_i, pair.counterfactual)[pair.horizon_row]
    out = {}
    for name in sorted(model.schemas):
        schema = model.schemas[name]
        vp = model.vae[name]
        e_fact = vae.expected_scores(vae.decode_ordinal(schema, vp, z_fact))
        e_cf = vae.expected_scores(vae.decode_ordinal(schema, vp, z_cf))
        out[name] = e_fact - e_cf
    return out


@dataclass
class InstrumentEffect:
    mean: float                # mean sum-score difference across seeds
    sd: float                  # sd of the per-seed patient means across seeds
    percent_of_max: float
    item_means: np.ndarray
    sign_stable: bool          # no seed flipped the aggregated effect's sign
    per_seed_means: np.ndarray


@dataclass
class EffectReport:
    horizon: float
    n_seeds: int
    n_patients: int
    instruments: dict[str, InstrumentEffect]


def aggregate_effects(per_seed: list[dict[str, dict[str, np.ndarray]]],
                      schemas, horizon: float) -> EffectReport:
    """Patient means per seed, then mean/SD across seeds.

    ``per_seed[s][pid][instrument]`` holds per-item differences. The percent
    column scales by the instrument's maximum official sum score; sum scores
    count official items only.
    """
    if not per_seed or not per_seed[0]:
        raise ValidationError("need at least one seed and one patient")
    names = sorted(schemas)
    n_patients = len(per_seed[0])
    instruments = {}
    for name in names:
        schema = schemas[name]
        official = np.array([it.official for it in schema.items])
        seed_sums, seed_items = [], []
        for seed_effects in per_seed:
            sums = [float(diff[name][official].sum()) for diff in seed_effects.values()]
            items = np.mean([diff[name] for diff in seed_effects.values()], axis=0)
            seed_sums.append(float(np.mean(sums)))
            seed_items.append(items)
        seed_sums = np.asarray(seed_sums)
        mean = float(seed_sums.mean())
        sd = float(seed_sums.std(ddof=1)) if seed_sums.size > 1 else 0.0
        sign_stable = bool(np.all(seed_sums > 0) if mean > 0 else np.all(seed_sums < 0))
        instruments[name] = InstrumentEffect(
            mean=mean, sd=sd,
            percent_of_max=100.0 * mean / schema.max_sum_score,
            item_means=np.mean(seed_items, axis=0),
            sign_stable=sign_stable,
            per_seed_means=seed_sums)
    return EffectReport(horizon, len(per_seed), n_patients, instruments)


def effect_study(dataset: Dataset, spec: ModelSpec, config: TrainConfig,
                 horizon: float = 1.0, n_seeds: int = 10, seed: int = 0,
                 only_observed_horizon: bool = False) -> EffectReport:
    """Train ``n_seeds`` times and aggregate switch effects across patients and seeds.

    All switched patients enter via model extrapolation by default;
    ``only_observed_horizon`` restricts to patients whose follow-up covers
    t_switch + horizon.
    """
    master = np.random.SeedSequence(seed)
    per_seed = []
    for child in master.spawn(n_seeds):
        rng = np.random.default_rng(child)
        model = training.fit_joint(dataset, spec, config, rng=rng)
        effects = {}
        for pat in sorted(dataset.patients, key=lambda p: p.pid):
            if not math.isfinite(pat.t_switch):
                continue
            if only_observed_horizon and pat.visits[-1] < pat.t_switch + horizon:
                continue
            effects[pat.pid] = switch_effect(model, pat, horizon)
        if not effects:
            raise ValidationError("no switched patients available for the effect study")
        per_seed.append(effects)
    return aggregate_effects(per_seed, dataset.schemas, horizon)


# ---------------------------------------------------------------------------
# artificial switch injection
# ---------------------------------------------------------------------------

def inject_artificial_switch(dataset: Dataset, rate: int = 1, period: float = 0.5,
                             rng: np.random.Generator | None = None) -> tuple[Dataset, dict]:
    """Add an artificial post-switch improvement of ``rate`` items per ``period`` years.

    For every completed period after the switch one randomly chosen item that
    has not reached its top level gains a point, permanently: the same item
    keeps the extra point at subsequent visits. If that item is already maxed
    at a later visit the point moves to another eligible item there; with no
    eligible item left the point is dropped and counted. Pre-switch
    observations are untouched and no item ever exceeds its ceiling.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    dropped = 0
    new_patients = []
    for pat in dataset.patients:
        new_obs = {}
        # persistent item choice per (instrument, mark index)
        mark_items: dict[str, dict[int, int]] = {name: {} for name in dataset.schemas}
        for vi in range(pat.n_visits):
            t = pat.visits[vi]
            dt = t - pat.t_switch if math.isfinite(pat.t_switch) else -math.inf
            for name in pat.instruments_at(vi):
                obs = pat.observations[(vi, name)]
                if dt <= 0:
                    new_obs[(vi, name)] = obs
                    continue
                schema = dataset.schemas[name]
                max_levels = np.array([it.levels - 1 for it in schema.items])
                n_marks = int(math.floor((dt + 1e-9) / period)) * rate
                levels = obs.levels.copy()
                add = np.zeros(schema.n_items, dtype=int)
                chosen = mark_items[name]
                for mark in range(1, n_marks + 1):
                    eligible = np.nonzero(~obs.missing & (levels + add < max_levels))[0]
                    if mark not in chosen:
                        if eligible.size == 0:
                            dropped += 1
                            continue
                        chosen[mark] = int(rng.choice(eligible))
                    j = chosen[mark]
                    if not obs.missing[j] and levels[j] + add[j] < max_levels[j]:
                        add[j] += 1
                    elif eligible.size > 0:
                        add[int(rng.choice(eligible))] += 1
                    else:
                        dropped += 1
                new_obs[(vi, name)] = Observation(levels + add, obs.missing.copy(), obs.cannot.copy())
        new_patients.append(replace(pat, observations=new_obs))
    out = Dataset(dataset.schemas, new_patients, dataset.covariate_names,
                  dataset.treatments, dataset.standardization)
    return out, {"points_dropped_at_ceiling": dropped}
