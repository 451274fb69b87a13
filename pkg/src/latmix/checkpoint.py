"""Versioned npz checkpoints for training state.

A checkpoint captures everything needed to resume training bit-exactly:
network and cutpoint arrays, Adam accumulators, mixed-model parameters,
BLUPs, final latents, the loss trace, and the RNG state. Designs and
prepared arrays are rebuilt deterministically from the dataset and spec.
"""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from . import nn
from .dataio import Dataset, _schema_from_json, _schema_to_json
from .errors import ValidationError
from .mlmm import ModelSpec
from .training import JointTrainer, MixedMaps, TrainConfig

FORMAT_VERSION = 1


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["hidden"] = list(config.hidden)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["hidden"] = tuple(d.get("hidden", (250, 100)))
    return TrainConfig(**d)


def spec_to_dict(spec: ModelSpec) -> dict:
    d = asdict(spec)
    d["covariates"] = list(spec.covariates)
    d["treatments"] = list(spec.treatments)
    return d


def spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    d["covariates"] = tuple(d.get("covariates", ()))
    d["treatments"] = tuple(d.get("treatments", ("A",)))
    return ModelSpec(**d)


def save_checkpoint(trainer: JointTrainer, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    counts = {}
    for name in trainer.prep.instruments:
        vp = trainer.vae_params[name]
        arrs = vp.arrays()
        counts[name] = {"enc": len(vp.encoder.arrays()), "dec": len(vp.decoder.arrays()),
                        "incr": len(vp.cut_incr)}
        for j, a in enumerate(arrs):
            arrays[f"vae|{name}|{j}"] = a
    for j, (m, v) in enumerate(zip(trainer.adam.m, trainer.adam.v)):
        arrays[f"adam|m|{j}"] = m
        arrays[f"adam|v|{j}"] = v
    arrays["mm|B"] = trainer.B
    arrays["mm|log_phi"] = trainer.log_phi
    arrays["mm|log_sigma"] = trainer.log_sigma
    for pid in trainer.prep.pids:
        arrays[f"blup|{pid}"] = trainer.blups[pid]
        if pid in trainer.final_latents:
            arrays[f"lat|{pid}"] = trainer.final_latents[pid]
    meta = {
        "version": FORMAT_VERSION,
        "config": config_to_dict(trainer.config),
        "spec": spec_to_dict(trainer.spec),
        "stats": trainer.prep.stats,
        "schemas": [_schema_to_json(trainer.prep.schemas[n]) for n in trainer.prep.instruments],
        "array_counts": counts,
        "adam_step": trainer.adam.step,
        "epoch": trainer.epoch,
        "trace": trainer.trace,
        "diagnostics": trainer.diagnostics,
        "pids": trainer.prep.pids,
        "rng_state": trainer.rng.bit_generator.state,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path, dataset: Dataset) -> JointTrainer:
    """Rebuild a trainer from a checkpoint; resuming reproduces an
    uninterrupted run bit-for-bit given the same seed stream."""
    with np.load(path) as zf:
        meta = json.loads(bytes(zf["meta"].tobytes()).decode())
        if meta["version"] != FORMAT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {meta['version']}")
        config = config_from_dict(meta["config"])
        spec = spec_from_dict(meta["spec"])
        trainer = JointTrainer(dataset, spec, config,
                               rng=np.random.default_rng(0))
        if trainer.prep.pids != meta["pids"]:
            raise ValidationError("checkpoint patients do not match the dataset")
        for name in trainer.prep.instruments:
            vp = trainer.vae_params[name]
            n = len(vp.arrays())
            arrs = [np.array(zf[f"vae|{name}|{j}"]) for j in range(n)]
            trainer.vae_params[name] = vp.replace_arrays(arrs)
        n_flat = len(trainer._flat_arrays())
        m = tuple(np.array(zf[f"adam|m|{j}"]) for j in range(n_flat))
        v = tuple(np.array(zf[f"adam|v|{j}"]) for j in range(n_flat))
        trainer.adam = nn.AdamState(m, v, int(meta["adam_step"]), config.lr)
        trainer.B = np.array(zf["mm|B"])
        trainer.log_phi = np.array(zf["mm|log_phi"])
        trainer.log_sigma = np.array(zf["mm|log_sigma"])
        trainer.blups = {pid: np.array(zf[f"blup|{pid}"]) for pid in meta["pids"]}
        trainer.final_latents = {pid: np.array(zf[f"lat|{pid}"]) for pid in meta["pids"]
                                 if f"lat|{pid}" in zf}
        trainer.epoch = int(meta["epoch"])
        trainer.trace = meta["trace"]
        trainer.diagnostics = meta["diagnostics"]
        trainer.rng.bit_generator.state = meta["rng_state"]
        trainer.maps = MixedMaps(trainer.prep, config.d, trainer.log_phi, trainer.log_sigma)
    return trainer
