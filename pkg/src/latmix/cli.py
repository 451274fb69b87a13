"""Command-line interface: simulate, fit, test, effect, inject, meta, report.

Every command derives all randomness from a single seed, writes its outputs
into an output directory, and drops a run manifest there recording the
command, config hash, dataset hash, seed and output hashes. Figure-style
outputs are delimited text files ready for plotting, not images.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
from scipy.stats import chi2

from . import baseline, checkpoint, dataio, effects, inference, synth, training
from .dataio import IngestRules
from .errors import ValidationError

VERSION = "0.1.0"


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def load_config(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def parse_model_spec(cfg: dict) -> "checkpoint.ModelSpec":
    return checkpoint.spec_from_dict(cfg.get("model", {}))


def parse_train_config(cfg: dict) -> training.TrainConfig:
    return checkpoint.config_from_dict(cfg.get("train", {}))


def parse_rules(cfg: dict) -> IngestRules:
    return IngestRules(**cfg.get("ingest", {}))


def write_manifest(out_dir: Path, command: str, cfg: dict, dataset_path, seed,
                   outputs: list[Path], started: float, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "config_hash": _config_hash(cfg),
        "dataset_hash": _sha256_file(dataset_path) if dataset_path else None,
        "seed": seed,
        "version": VERSION,
        "outputs": {p.name: _sha256_file(p) for p in outputs},
        "extra": extra or {},
        "timing": {"wall_seconds": time.time() - started, "started_unix": started},
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _write_tsv(path: Path, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(x) for x in row) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    started = time.time()
    cfg = load_config(args.config) if args.config else {}
    gen_cfg = dict(cfg.get("generator", {}))
    preset = gen_cfg.pop("preset", "benchmark")
    seed = args.seed if args.seed is not None else gen_cfg.pop("seed", 0)
    gen_cfg.pop("seed", None)
    makers = {"benchmark": synth.benchmark_config, "desk": synth.desk_config,
              "paper_scale": synth.paper_scale_config}
    if preset not in makers:
        raise ValidationError(f"unknown generator preset {preset!r}")
    config = makers[preset](seed=seed, **gen_cfg)
    dataset, truth, counts = synth.generate_registry(config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds_path = out_dir / "dataset.tsv"
    dataio.write_dataset(dataset, ds_path)
    outputs = [ds_path]
    gt_path = out_dir / "ground_truth.npz"
    arrays = {f"lat|{pid}": z for pid, z in truth.latents.items()}
    arrays.update({f"re|{pid}": u for pid, u in truth.random_effects.items()})
    arrays["meta"] = np.frombuffer(json.dumps(
        {"d_true": truth.d_true, "switch_effect": truth.switch_effect}).encode(), dtype=np.uint8)
    np.savez(gt_path, **arrays)
    outputs.append(gt_path)
    write_manifest(out_dir, "simulate", cfg, ds_path, seed, outputs, started,
                   extra={"filter_counts": counts, "n_patients": len(dataset.patients)})
    print(f"simulated {len(dataset.patients)} patients -> {ds_path}")
    return 0


def _ingest(args, cfg):
    dataset, counts = dataio.ingest(args.dataset, parse_rules(cfg))
    return dataset, counts


def cmd_fit(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    dataset, counts = _ingest(args, cfg)
    spec = parse_model_spec(cfg)
    tc = parse_train_config(cfg)
    if args.seed is not None:
        tc = checkpoint.config_from_dict({**checkpoint.config_to_dict(tc), "seed": args.seed})
    trainer = training.JointTrainer(dataset, spec, tc)
    for _ in range(tc.epochs):
        trainer.train_epoch()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ck_path = out_dir / "checkpoint.npz"
    checkpoint.save_checkpoint(trainer, ck_path)
    trace_path = out_dir / "trace.tsv"
    _write_tsv(trace_path, ["epoch", "recon", "kl", "gamma", "eta", "total"],
               [[e["epoch"], repr(e["recon"]), repr(e["kl"]), repr(e["gamma"]),
                 repr(e["eta"]), repr(e["total"])] for e in trainer.trace])
    write_manifest(out_dir, "fit", cfg, args.dataset, tc.seed, [ck_path, trace_path],
                   started, extra={"filter_counts": counts})
    print(f"fit complete after {tc.epochs} epochs -> {ck_path}")
    return 0


def cmd_test(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    dataset, _ = _ingest(args, cfg)
    spec = parse_model_spec(cfg)
    tc = parse_train_config(cfg)
    tcfg = cfg.get("test", {})
    block = args.block or tcfg.get("block", "switch")
    level = args.level or tcfg.get("level", "patient")
    k = args.k if args.k is not None else tcfg.get("k")
    replicates = args.replicates or tcfg.get("replicates", 1000)
    alpha = args.alpha if args.alpha is not None else tcfg.get("alpha", 0.05)
    seed = args.seed if args.seed is not None else tcfg.get("seed", 0)
    effect_kind = tcfg.get("effect_kind", "fixed")
    result = inference.lr_test(dataset, spec, tc, block, level=level, k=k,
                               n_replicates=replicates, alpha=alpha, seed=seed,
                               effect_kind=effect_kind, n_jobs=args.jobs)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    res_path = out_dir / "test_result.json"
    with open(res_path, "w") as fh:
        json.dump({"block": result.block, "lambda_obs": result.lam_obs, "rd": result.rd,
                   "p_value": result.p, "alpha": result.alpha, "threshold": result.threshold,
                   "significant": result.significant, "effect_kind": result.effect_kind,
                   "null_summary": result.null.summary(),
                   "n_failed": result.null.n_failed, "d": tc.d},
                  fh, indent=2, sort_keys=True)
    lam_path = out_dir / "null_lambdas.tsv"
    _write_tsv(lam_path, ["replicate", "lambda"],
               [[i, repr(float(x))] for i, x in enumerate(result.null.lam)])
    write_manifest(out_dir, "test", cfg, args.dataset, seed, [res_path, lam_path], started)
    print(f"Lambda_obs = {result.lam_obs:.2f} (rd = {result.rd}), "
          f"p = {result.p:.4g}, threshold({alpha}) = {result.threshold:.2f}")
    return 0


def cmd_effect(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    dataset, _ = _ingest(args, cfg)
    spec = parse_model_spec(cfg)
    tc = parse_train_config(cfg)
    ecfg = cfg.get("effect", {})
    horizon = args.horizon if args.horizon is not None else ecfg.get("horizon", 1.0)
    n_seeds = args.seeds or ecfg.get("seeds", 10)
    seed = args.seed if args.seed is not None else ecfg.get("seed", 0)
    report = effects.effect_study(dataset, spec, tc, horizon=horizon,
                                  n_seeds=n_seeds, seed=seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    eff_path = out_dir / "effects.tsv"
    rows = []
    for name in sorted(report.instruments):
        e = report.instruments[name]
        rows.append([name, repr(e.mean), repr(e.sd), repr(e.percent_of_max),
                     int(e.sign_stable)])
    _write_tsv(eff_path, ["instrument", "mean_sum_diff", "sd", "percent_of_max",
                          "sign_stable"], rows)
    item_path = out_dir / "effects_items.tsv"
    item_rows = []
    for name in sorted(report.instruments):
        for j, v in enumerate(report.instruments[name].item_means):
            item_rows.append([name, j, repr(float(v))])
    _write_tsv(item_path, ["instrument", "item", "mean_diff"], item_rows)
    write_manifest(out_dir, "effect", cfg, args.dataset, seed, [eff_path, item_path],
                   started, extra={"horizon": horizon, "n_seeds": n_seeds,
                                   "n_patients": report.n_patients})
    print(f"effects over {n_seeds} seeds, {report.n_patients} patients -> {eff_path}")
    return 0


def cmd_inject(args) -> int:
    started = time.time()
    dataset = dataio.read_dataset(args.dataset)
    rng = np.random.default_rng(args.seed or 0)
    perturbed, diag = effects.inject_artificial_switch(dataset, rate=args.rate,
                                                       period=args.period, rng=rng)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "dataset_injected.tsv"
    dataio.write_dataset(perturbed, out_path)
    write_manifest(out_dir, "inject", {"rate": args.rate, "period": args.period},
                   args.dataset, args.seed or 0, [out_path], started, extra=diag)
    print(f"injected +{args.rate}/{args.period}y -> {out_path}")
    return 0


def cmd_meta(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    dataset, _ = _ingest(args, cfg)
    spec = parse_model_spec(cfg)
    mcfg = cfg.get("meta", {})
    min_patients = mcfg.get("min_patients", 30)
    replicates = mcfg.get("replicates", 200)
    n_null = mcfg.get("null_replicates", 199)
    seed = args.seed if args.seed is not None else mcfg.get("seed", 0)
    fits = {}
    rows = []
    for name in dataset.instrument_names:
        ifit = baseline.fit_instrument_lmm(dataset, name, spec, min_patients=min_patients)
        fits[name] = ifit
        coef = "" if ifit.switch_coef is None else ",".join(repr(float(c)) for c in ifit.switch_coef)
        rows.append([name, ifit.n_eligible, coef, ifit.skipped_reason or ""])
    usable = [n for n, f in fits.items() if f.fit is not None]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inst_path = out_dir / "per_instrument.tsv"
    _write_tsv(inst_path, ["instrument", "n_eligible", "switch_coef", "skipped_reason"], rows)
    outputs = [inst_path]
    result_obj = {"per_instrument": {n: fits[n].n_eligible for n in fits},
                  "skipped": {n: fits[n].skipped_reason for n in fits if fits[n].fit is None}}
    if len(usable) >= 2:
        cov, mat, dropped = baseline.bootstrap_cov(dataset, usable, spec,
                                                   n_replicates=replicates, seed=seed,
                                                   min_patients=min_patients)
        theta = np.concatenate([fits[n].switch_coef for n in usable])
        meta_res = baseline.meta_gls(theta, cov, n_coords=len(spec.treatments))
        p = baseline.calibrate_meta(dataset, usable, spec, meta_res.stat, meta_res.covariance,
                                    n_null=n_null, seed=seed + 1, min_patients=min_patients)
        result_obj.update({"pooled": meta_res.pooled.tolist(), "stat": meta_res.stat,
                           "p_value": p, "instruments": usable,
                           "bootstrap_dropped": dropped,
                           "covariance": meta_res.covariance.tolist()})
    meta_path = out_dir / "meta_result.json"
    with open(meta_path, "w") as fh:
        json.dump(result_obj, fh, indent=2, sort_keys=True)
    outputs.append(meta_path)
    write_manifest(out_dir, "meta", cfg, args.dataset, seed, outputs, started)
    print(f"meta-analysis over {len(usable)} instruments -> {meta_path}")
    return 0


def cmd_report(args) -> int:
    started = time.time()
    run_dir = Path(args.run_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    trace = run_dir / "trace.tsv"
    if trace.exists():
        dst = out_dir / "fig_loss_trace.tsv"
        dst.write_text(trace.read_text())
        outputs.append(dst)
    lam_file = run_dir / "null_lambdas.tsv"
    res_file = run_dir / "test_result.json"
    if lam_file.exists() and res_file.exists():
        with open(res_file) as fh:
            res = json.load(fh)
        lam = np.array([float(line.split("\t")[1])
                        for line in lam_file.read_text().splitlines()[1:]])
        lam.sort()
        ecdf = np.arange(1, lam.size + 1) / lam.size
        theory = chi2.cdf(lam, df=res["rd"])
        dst = out_dir / "fig_lr_ecdf.tsv"
        _write_tsv(dst, ["lambda", "empirical_cdf", f"chi2_{res['rd']}_cdf"],
                   [[repr(float(l)), repr(float(e)), repr(float(t))]
                    for l, e, t in zip(lam, ecdf, theory)])
        outputs.append(dst)
    for name in ("effects.tsv", "effects_items.tsv"):
        src = run_dir / name
        if src.exists():
            dst = out_dir / f"fig_{name}"
            dst.write_text(src.read_text())
            outputs.append(dst)
    if not outputs:
        print("nothing to report: no trace, test, or effect outputs found", file=sys.stderr)
        return 1
    write_manifest(out_dir, "report", {}, None, None, outputs, started)
    print(f"report files -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="latmix",
                                 description="Latent-space mixed modeling across measurement instruments")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic registry")
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the joint VAE + mixed-model fit")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("test", help="knockoff-bootstrap likelihood-ratio test")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--block", default=None)
    p.add_argument("--level", choices=["patient", "visit"], default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("effect", help="item-level switch-effect quantification")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_effect)

    p = sub.add_parser("inject", help="inject an artificial post-switch improvement")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--rate", type=int, default=1)
    p.add_argument("--period", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("meta", help="per-instrument sum-score models + GLS meta-analysis")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_meta)

    p = sub.add_parser("report", help="render run outputs as plot-ready tables")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pipeline failures -> diagnostic + exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
