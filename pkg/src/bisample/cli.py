"""Command-line entry point: gen / train / eval / ablate / diagnose.

Every run writes a manifest (resolved config, tool version, seed) into its
output directory before any heavy work, and each run is reconstructible
from that manifest alone. Exit codes: 0 ok, 2 config error, 3 divergence,
4 IO failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import datagen, encoder, evaluation, pipeline
from .ablations import SUITES, BenchmarkConfig, BenchRunner, run_ablation
from .domqueue import CASES, DominantQueues, update_queues
from .errors import BisampleError, ConfigError, StageDiverged
from .numkit import softmax_rows
from .prototypes import PrototypeStore, energy_report
from .rngkit import substream
from .verification import build_npairs_batch

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

OUTDIR_ENV = "BISAMPLE_OUT"

_pretty = False


def log(event: str, **kv) -> None:
    if _pretty:
        body = "  ".join(f"{k}={v}" for k, v in kv.items())
        print(f"[{event}] {body}")
    else:
        parts = [f"event={event}"] + [f"{k}={v}" for k, v in kv.items()]
        print(" ".join(parts))


def _outdir(args) -> Path:
    out = os.environ.get(OUTDIR_ENV) or args.out
    if out is None:
        raise ConfigError("no output directory given (--out or BISAMPLE_OUT)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(outdir: Path, command: str, payload: dict) -> None:
    manifest = {"tool": "bisample", "version": __version__, "command": command, **payload}
    with open(outdir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# gen


_GEN_WORLD_KEYS = {"seed": int, "input_dim": int, "latent_dim": int}
_GEN_SET_KEYS = {
    "classes": int,
    "samples_per_class": int,
    "id_noise_sigma": float,
    "spot_noise_sigma": float,
    "noise_sigma": float,  # thick shorthand: same sigma both sides
    "heterogeneity_shift": float,
    "mislabel_rate": float,
    "low_quality_rate": float,
}
_GEN_SECTIONS = ("world", "thick", "train", "test")


def _parse_gen_config(path) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(path, "r", encoding="utf-8") as fh:
        try:
            parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    out: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _GEN_SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        keys = _GEN_WORLD_KEYS if section == "world" else _GEN_SET_KEYS
        out[section] = {}
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(f"{path}: unknown key {section}.{key}")
            try:
                out[section][key] = keys[key](raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {section}.{key}: {exc}") from exc
    return out


_GEN_DEFAULTS = {
    "world": {"seed": 0, "input_dim": 64, "latent_dim": 16},
    "thick": {"classes": 500, "samples_per_class": 16, "noise_sigma": 0.15},
    "train": {"classes": 5000},
    "test": {"classes": 500, "mislabel_rate": 0.0, "low_quality_rate": 0.0},
}


def _resolved_gen_config(args) -> dict:
    config = {k: dict(v) for k, v in _GEN_DEFAULTS.items()}
    if args.config:
        for section, values in _parse_gen_config(args.config).items():
            config[section].update(values)
    if args.seed is not None:
        config["world"]["seed"] = args.seed
    return config


def _gen_specs(config: dict) -> tuple[datagen.GenSpec, datagen.GenSpec, datagen.GenSpec, int]:
    world = config["world"]

    def spec_for(section: str, start: int) -> datagen.GenSpec:
        values = dict(config[section])
        values.pop("samples_per_class", None)
        sigma = values.pop("noise_sigma", None)
        if sigma is not None:
            values.setdefault("id_noise_sigma", sigma)
            values.setdefault("spot_noise_sigma", sigma)
        if section == "thick":
            values.setdefault("heterogeneity_shift", 0.0)
            values.setdefault("mislabel_rate", 0.0)
            values.setdefault("low_quality_rate", 0.0)
        n = values.pop("classes")
        return datagen.GenSpec(
            n_classes=n,
            input_dim=world["input_dim"],
            latent_dim=world["latent_dim"],
            seed=world["seed"],
            class_id_start=start,
            **values,
        )

    thick = spec_for("thick", 0)
    train = spec_for("train", thick.n_classes)
    test = spec_for("test", thick.n_classes + train.n_classes)
    return thick, train, test, config["thick"]["samples_per_class"]


def cmd_gen(args) -> int:
    outdir = _outdir(args)
    config = _resolved_gen_config(args)
    _write_manifest(outdir, "gen", {"config": config})
    thick_spec, train_spec, test_spec, thick_s = _gen_specs(config)

    log("gen_start", out=outdir, seed=config["world"]["seed"])
    thick = datagen.generate_thick(thick_spec, thick_s)
    datagen.save_thick(thick, outdir / "thick.lblt")
    train = datagen.generate(train_spec)
    datagen.save_bisample(train, outdir / "train.lbld")
    datagen.write_flags_sidecar(train, outdir / "train.flags.txt")
    test = datagen.generate(test_spec)
    datagen.save_bisample(test, outdir / "test.lbld")
    for name in ("thick.lblt", "train.lbld", "test.lbld"):
        log("gen_file", file=name, sha256=datagen.file_sha256(outdir / name))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    if args.plan:
        plan = pipeline.parse_plan(args.plan)
        base = Path(args.plan).parent
        for attr in ("thick", "train", "test"):
            value = getattr(plan.data, attr)
            if value:
                setattr(plan.data, attr, str((base / value).resolve()))
    elif args.from_manifest:
        with open(args.from_manifest, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        plan = pipeline.plan_from_dict(manifest["plan"])
    else:
        raise ConfigError("train needs --plan or --from-manifest")
    if args.seed is not None:
        plan.seed = args.seed

    outdir = _outdir(args)
    _write_manifest(outdir, "train", {"plan": pipeline.plan_to_dict(plan), "seed": plan.seed})
    log("train_start", out=outdir, seed=plan.seed, stages=plan.stage_pattern())
    result = pipeline.train(plan, outdir, resume=args.resume, stop_after=args.stop_after)
    for name, path in sorted(result.checkpoints.items()):
        log("checkpoint", name=name, path=path)
    for stage, info in sorted(result.record.stage_info.items()):
        log(
            "stage_done",
            stage=stage,
            skipped=info.get("skipped"),
            converged=info.get("converged"),
            elapsed=f"{info.get('elapsed', 0.0):.2f}s",
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    outdir = _outdir(args)
    far_targets = [float(f) for f in args.far.split(",") if f.strip()]
    _write_manifest(
        outdir, "eval",
        {"encoder": str(args.encoder), "data": str(args.data), "far_targets": far_targets},
    )
    params = encoder.load_encoder(args.encoder)
    ds = datagen.load_bisample(args.data)
    pairs = datagen.make_test_pairs(ds)
    scores = evaluation.score_pairs(params, ds, pairs)
    points = evaluation.vr_at_far(scores, far_targets)
    curve = evaluation.roc(scores)
    evaluation.write_far_report(points, outdir / "vr_report.csv")
    evaluation.write_roc_points(curve, outdir / "roc_points.csv")
    if args.svg:
        evaluation.write_roc_svg(curve, outdir / "roc.svg")
    for p in points:
        log("vr", far_target=f"{p.target:g}", achieved=f"{p.achieved_far:.3g}",
            threshold=f"{p.threshold:.4f}", vr=f"{p.vr:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose


def cmd_diagnose(args) -> int:
    outdir = _outdir(args)
    _write_manifest(
        outdir, "diagnose",
        {"encoder": str(args.encoder), "prototypes": str(args.prototypes),
         "queues": str(args.queues) if args.queues else None,
         "data": str(args.data), "seed": args.seed, "batches": args.batches,
         "scale": args.scale, "batch_classes": args.batch_classes},
    )
    params = encoder.load_encoder(args.encoder)
    store = PrototypeStore.load(args.prototypes)
    ds = datagen.load_bisample(args.data)
    if ds.n_classes != store.n_classes:
        raise ConfigError(
            f"dataset has {ds.n_classes} classes but the store has {store.n_classes}"
        )
    queues = DominantQueues.load(args.queues) if args.queues else None

    n = store.n_classes
    k_list = sorted({1, max(1, n // 100), max(1, n // 20), max(1, n // 10), n})
    rng = substream(args.seed, "diagnose", "batch")
    ce_sums = {k: 0.0 for k in k_list}
    cases = {c: 0 for c in CASES}
    for _ in range(args.batches):
        bplan = build_npairs_batch(ds, args.batch_classes, rng)
        fb, _ = encoder.forward(params, bplan.gather(ds), bplan.labels)
        probs = softmax_rows(args.scale * (fb.features @ store.w.T))
        report = energy_report(np.arange(n, dtype=np.int64), bplan.labels, probs, k_list)
        for k, ce in report.ce:
            ce_sums[k] += ce
        if queues is not None:
            for d in update_queues(bplan.labels, np.arange(n, dtype=np.int64), probs, queues):
                cases[d.case] += 1

    with open(outdir / "ce_report.csv", "w", encoding="utf-8") as fh:
        fh.write("k,ce\n")
        for k in k_list:
            fh.write(f"{k},{ce_sums[k] / args.batches:.8g}\n")
            log("ce", k=k, ce=f"{ce_sums[k] / args.batches:.4f}")
    if queues is not None:
        with open(outdir / "queue_cases.csv", "w", encoding="utf-8") as fh:
            fh.write("case,count\n")
            for c in CASES:
                fh.write(f"{c},{cases[c]}\n")
        log("queue_cases", **cases)
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args) -> int:
    outdir = _outdir(args)
    cfg = BenchmarkConfig()
    if args.seeds:
        cfg = replace(cfg, seeds=tuple(int(s) for s in args.seeds.split(",")))
    _write_manifest(outdir, "ablate", {"suite": args.suite, "bench": asdict(cfg)})
    log("ablate_start", suite=args.suite, seeds=",".join(str(s) for s in cfg.seeds))
    runner = BenchRunner(cfg)
    table = run_ablation(args.suite, runner)
    raw_path = outdir / f"{args.suite}_runs.csv"
    table.write_csv(raw_path)
    medians = table.medians()
    with open(outdir / f"{args.suite}_summary.csv", "w", encoding="utf-8") as fh:
        fh.write("arm,median_vr\n")
        for arm, vr in medians.items():
            fh.write(f"{arm},{vr:.6f}\n")
            log("ablate_arm", arm=arm, median_vr=f"{vr:.4f}")
    log("ablate_done", table=raw_path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bisample", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic thick/train/test datasets")
    p.add_argument("--config", help="sectioned key=value generation config")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="override the world seed")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run the three-stage training plan")
    p.add_argument("--plan", help="plan file")
    p.add_argument("--from-manifest", help="re-run from a train manifest")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="override the plan seed")
    p.add_argument("--resume", action="store_true", help="keep completed stages")
    p.add_argument("--stop-after", type=int, choices=(1, 2, 3), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a bisample test set")
    p.add_argument("--encoder", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--far", default="1e-2,1e-3,1e-4", help="comma-separated FAR targets")
    p.add_argument("--svg", action="store_true", help="also emit an ROC plot")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="energy-concentration and queue statistics")
    p.add_argument("--encoder", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--queues", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batches", type=int, default=16)
    p.add_argument("--batch-classes", type=int, default=32)
    p.add_argument("--scale", type=float, default=16.0, help="logit scale for the probability table")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("ablate", help="run a named ablation suite on the benchmark")
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    global _pretty
    parser = build_parser()
    args = parser.parse_args(argv)
    _pretty = bool(getattr(args, "pretty", False) or os.environ.get("BISAMPLE_PRETTY"))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except BisampleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entry() -> None:
    sys.exit(main())
