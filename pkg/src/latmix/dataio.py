"""Dataset model, delimited text format, and cohort ingestion filters.

A dataset file carries a JSON header block (instrument schemas, covariate
dictionary, treatments, standardization slot), a patient table and a long
observation table, all tab-separated. Floats are written with ``repr`` so
files round-trip bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import IngestionError, ValidationError
from .vae import InstrumentSchema, ItemSpec

FORMAT_TAG = "#latmix-dataset v1"


@dataclass
class Observation:
    """Item-level result of one instrument at one visit."""

    levels: np.ndarray   # (n_items,) int
    missing: np.ndarray  # (n_items,) bool
    cannot: np.ndarray   # (n_items,) bool


@dataclass
class Patient:
    pid: str
    baseline_age: float
    covariates: dict[str, float]
    t_switch: float                    # +inf when the patient never switched
    switch_to: str | None
    visits: np.ndarray                 # sorted ascending, years from first visit
    observations: dict[tuple[int, str], Observation]
    t_second_switch: float = math.inf

    def instruments_at(self, visit_idx: int) -> list[str]:
        return sorted(name for (v, name) in self.observations if v == visit_idx)

    @property
    def n_visits(self) -> int:
        return len(self.visits)


@dataclass
class Dataset:
    schemas: dict[str, InstrumentSchema]
    patients: list[Patient]
    covariate_names: tuple[str, ...]
    treatments: tuple[str, ...]
    standardization: dict | None = None

    @property
    def instrument_names(self) -> list[str]:
        return sorted(self.schemas)

    def validate(self) -> None:
        for pat in self.patients:
            v = np.asarray(pat.visits)
            if v.size and not (np.diff(v) > -1e-12).all():
                raise ValidationError(f"patient {pat.pid}: visits not sorted")
            for (vi, name), obs in pat.observations.items():
                if not 0 <= vi < pat.n_visits:
                    raise ValidationError(f"patient {pat.pid}: observation at unknown visit {vi}")
                schema = self.schemas.get(name)
                if schema is None:
                    raise ValidationError(f"patient {pat.pid}: unknown instrument {name!r}")
                if obs.levels.shape != (schema.n_items,):
                    raise ValidationError(f"patient {pat.pid}: {name} item count mismatch")
                for j, item in enumerate(schema.items):
                    if not obs.missing[j] and not 0 <= obs.levels[j] <= item.levels - 1:
                        raise ValidationError(
                            f"patient {pat.pid}: {name} item {j} level {obs.levels[j]} out of range")
            for vi in range(pat.n_visits):
                if not any(v == vi for (v, _) in pat.observations):
                    raise ValidationError(f"patient {pat.pid}: visit {vi} has no instrument")


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

def _schema_to_json(schema: InstrumentSchema) -> dict:
    return {"name": schema.name,
            "items": [{"levels": it.levels, "has_flag": it.has_flag, "official": it.official}
                      for it in schema.items]}


def _schema_from_json(obj: dict) -> InstrumentSchema:
    items = tuple(ItemSpec(int(it["levels"]), bool(it.get("has_flag", False)),
                           bool(it.get("official", True)))
                  for it in obj["items"])
    return InstrumentSchema(obj["name"], items)


def _fmt_float(x: float) -> str:
    if math.isinf(x):
        return "inf"
    return repr(float(x))


def write_dataset(dataset: Dataset, path) -> None:
    lines = [FORMAT_TAG]
    lines.append("#schema " + json.dumps(
        {"instruments": [_schema_to_json(dataset.schemas[n]) for n in dataset.instrument_names]},
        sort_keys=True))
    lines.append("#covariates " + json.dumps(list(dataset.covariate_names)))
    lines.append("#treatments " + json.dumps(list(dataset.treatments)))
    lines.append("#standardization " + json.dumps(dataset.standardization, sort_keys=True))
    lines.append("#patients")
    cov_cols = list(dataset.covariate_names)
    lines.append("\t".join(["pid", "baseline_age", "t_switch", "switch_to", "t_second_switch"] + cov_cols))
    for pat in dataset.patients:
        row = [pat.pid, _fmt_float(pat.baseline_age), _fmt_float(pat.t_switch),
               pat.switch_to or "", _fmt_float(pat.t_second_switch)]
        row += [_fmt_float(pat.covariates[c]) for c in cov_cols]
        lines.append("\t".join(row))
    lines.append("#observations")
    lines.append("\t".join(["pid", "time", "instrument", "levels", "missing", "cannot"]))
    for pat in dataset.patients:
        for (vi, name) in sorted(pat.observations):
            obs = pat.observations[(vi, name)]
            lines.append("\t".join([
                pat.pid, _fmt_float(float(pat.visits[vi])), name,
                ",".join(str(int(x)) for x in obs.levels),
                ",".join(str(int(x)) for x in obs.missing),
                ",".join(str(int(x)) for x in obs.cannot)]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_dataset(path) -> Dataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != FORMAT_TAG:
        raise IngestionError(f"{path}: not a latmix dataset (missing {FORMAT_TAG!r})")
    header: dict[str, str] = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("#patients"):
        if lines[i].startswith("#"):
            key, _, rest = lines[i][1:].partition(" ")
            header[key] = rest
        i += 1
    try:
        schema_obj = json.loads(header["schema"])
        covariates = tuple(json.loads(header["covariates"]))
        treatments = tuple(json.loads(header["treatments"]))
        standardization = json.loads(header.get("standardization", "null"))
    except (KeyError, json.JSONDecodeError) as exc:
        raise IngestionError(f"{path}: malformed header ({exc})")
    schemas = {}
    for obj in schema_obj["instruments"]:
        schema = _schema_from_json(obj)
        schemas[schema.name] = schema

    if i >= len(lines):
        raise IngestionError(f"{path}: missing #patients section")
    i += 1
    pat_header = lines[i].split("\t")
    expected = ["pid", "baseline_age", "t_switch", "switch_to", "t_second_switch"] + list(covariates)
    if pat_header != expected:
        raise IngestionError(f"{path}:{i + 1}: patient columns {pat_header} != {expected}")
    i += 1
    patients: dict[str, Patient] = {}
    while i < len(lines) and not lines[i].startswith("#observations"):
        parts = lines[i].split("\t")
        if len(parts) != len(expected):
            raise IngestionError(f"{path}:{i + 1}: expected {len(expected)} fields, got {len(parts)}")
        pid = parts[0]
        if pid in patients:
            raise IngestionError(f"{path}:{i + 1}: duplicate patient {pid!r}")
        covs = {c: float(v) for c, v in zip(covariates, parts[5:])}
        patients[pid] = Patient(pid, float(parts[1]), covs, float(parts[2]),
                                parts[3] or None, np.zeros(0), {}, float(parts[4]))
        i += 1
    if i >= len(lines):
        raise IngestionError(f"{path}: missing #observations section")
    i += 1
    obs_header = lines[i].split("\t")
    if obs_header != ["pid", "time", "instrument", "levels", "missing", "cannot"]:
        raise IngestionError(f"{path}:{i + 1}: unexpected observation columns")
    i += 1
    rows: dict[str, dict[float, dict[str, Observation]]] = {}
    for lineno in range(i, len(lines)):
        line = lines[lineno]
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise IngestionError(f"{path}:{lineno + 1}: expected 6 fields, got {len(parts)}")
        pid, t_str, name, lev_s, mis_s, can_s = parts
        if pid not in patients:
            raise IngestionError(f"{path}:{lineno + 1}: unknown patient {pid!r}")
        if name not in schemas:
            raise IngestionError(f"{path}:{lineno + 1}: unknown instrument {name!r}")
        n_items = schemas[name].n_items
        levels = np.array([int(x) for x in lev_s.split(",")], dtype=int)
        missing = np.array([bool(int(x)) for x in mis_s.split(",")], dtype=bool)
        cannot = np.array([bool(int(x)) for x in can_s.split(",")], dtype=bool)
        if levels.size != n_items or missing.size != n_items or cannot.size != n_items:
            raise IngestionError(f"{path}:{lineno + 1}: {name} expects {n_items} items")
        t = float(t_str)
        rows.setdefault(pid, {}).setdefault(t, {})[name] = Observation(levels, missing, cannot)
    out_patients = []
    for pid, pat in patients.items():
        times = sorted(rows.get(pid, {}))
        pat.visits = np.array(times, dtype=float)
        obs = {}
        for vi, t in enumerate(times):
            for name, o in rows[pid][t].items():
                obs[(vi, name)] = o
        pat.observations = obs
        out_patients.append(pat)
    ds = Dataset(schemas, out_patients, covariates, treatments, standardization)
    ds.validate()
    return ds


def dataset_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# cohort filters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IngestRules:
    """Cohort filters applied at ingestion; all thresholds configurable."""

    require_switch: bool = True
    min_years_each_side: float = 0.5
    min_visits: int = 4
    min_pre: int = 2
    min_post: int = 2
    max_missing_frac: float = 0.25
    min_switch_cohort: int = 10
    truncate_second_switch: bool = True
    enabled: bool = True


def apply_filters(dataset: Dataset, rules: IngestRules) -> tuple[Dataset, dict[str, int]]:
    """Apply cohort filters, returning the filtered dataset and per-filter counts.

    The filters are order-stable: running the pipeline on its own output
    changes nothing.
    """
    counts = {"observations_missing_frac": 0, "visits_dropped_empty": 0,
              "patients_truncated_second_switch": 0, "patients_no_switch": 0,
              "patients_short_treatment": 0, "patients_few_visits": 0,
              "patients_rare_treatment": 0}
    if not rules.enabled:
        return dataset, counts
    kept: list[Patient] = []
    for pat in dataset.patients:
        visits = list(pat.visits)
        obs = dict(pat.observations)
        if rules.truncate_second_switch and math.isfinite(pat.t_second_switch):
            keep_idx = [i for i, t in enumerate(visits) if t < pat.t_second_switch]
            if len(keep_idx) < len(visits):
                counts["patients_truncated_second_switch"] += 1
            remap = {old: new for new, old in enumerate(keep_idx)}
            visits = [visits[i] for i in keep_idx]
            obs = {(remap[v], n): o for (v, n), o in obs.items() if v in remap}
        # drop observations with too many missing items
        dropped_obs = []
        for key, o in obs.items():
            frac = float(np.mean(o.missing))
            if frac > rules.max_missing_frac:
                dropped_obs.append(key)
        for key in dropped_obs:
            counts["observations_missing_frac"] += 1
            del obs[key]
        # drop visits left with no instruments
        occupied = {v for (v, _) in obs}
        keep_idx = [i for i in range(len(visits)) if i in occupied]
        counts["visits_dropped_empty"] += len(visits) - len(keep_idx)
        remap = {old: new for new, old in enumerate(keep_idx)}
        visits = [visits[i] for i in keep_idx]
        obs = {(remap[v], n): o for (v, n), o in obs.items()}

        if rules.require_switch and not math.isfinite(pat.t_switch):
            counts["patients_no_switch"] += 1
            continue
        if math.isfinite(pat.t_switch) and visits:
            pre_span = pat.t_switch - visits[0]
            post_span = visits[-1] - pat.t_switch
            if pre_span < rules.min_years_each_side or post_span < rules.min_years_each_side:
                counts["patients_short_treatment"] += 1
                continue
        n_pre = sum(1 for t in visits if t < pat.t_switch)
        n_post = sum(1 for t in visits if t >= pat.t_switch)
        if len(visits) < rules.min_visits or n_pre < rules.min_pre or n_post < rules.min_post:
            counts["patients_few_visits"] += 1
            continue
        kept.append(replace(pat, visits=np.array(visits, dtype=float), observations=obs))
    # rare-treatment exclusion, iterated to a fixed point for idempotence
    while True:
        tally: dict[str, int] = {}
        for pat in kept:
            if pat.switch_to is not None:
                tally[pat.switch_to] = tally.get(pat.switch_to, 0) + 1
        rare = {tr for tr, n in tally.items() if n < rules.min_switch_cohort}
        if not rare:
            break
        before = len(kept)
        kept = [p for p in kept if p.switch_to not in rare]
        counts["patients_rare_treatment"] += before - len(kept)
    if not kept:
        raise IngestionError("no patients remain after cohort filters")
    return Dataset(dataset.schemas, kept, dataset.covariate_names,
                   dataset.treatments, dataset.standardization), counts


def ingest(path, rules: IngestRules | None = None) -> tuple[Dataset, dict[str, int]]:
    """Read a dataset file, validate it, and apply the cohort filters."""
    dataset = read_dataset(path)
    return apply_filters(dataset, rules or IngestRules())
