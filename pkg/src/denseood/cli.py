"""Command-line entry point wiring the pipeline stages.

Subcommands: worldgen, synth, train, score, eval, report, sweep-odin,
reproduce.  Every subcommand validates its config against the published
JSON schema, writes its artifacts plus a run-record, and exits 0 on
success, 2 on validation errors, 1 on runtime errors.  Errors go to
stderr with a machine-parsable ``ERROR:<module>:<code>`` prefix.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, evaluation, net, scoring, synth, train, worldgen
from .datamodel import DatasetManifest, derive_seed
from .experiments import (
    ExperimentScale,
    build_eval_sets,
    evaluate_negative_protocol,
    generate_worlds,
    run_seed_experiment,
    train_models,
)
from .net import FcnConfig, FreezePolicy, ModelCheckpoint
from .train import TrainConfig


class ValidationFailure(Exception):
    """Config rejected before any work started (exit code 2)."""


RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "worldgen": {
            "type": "object",
            "properties": {
                "preset": {"enum": ["narrow", "wide", "distorted"]},
                "n": {"type": "integer", "minimum": 1},
                "kind": {"enum": ["inlier", "background"]},
                "config": {"type": "object"},
            },
            "additionalProperties": True,
        },
        "synth": {
            "type": "object",
            "properties": {
                "recipe": {"enum": sorted(synth.RECIPES) + ["mixed_training"]},
                "paste_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "shorter_side": {"type": "integer", "minimum": 32},
            },
            "additionalProperties": True,
        },
        "train": {
            "type": "object",
            "properties": {
                "mode": {"enum": ["primary", "confidence", "discriminative"]},
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "minimum": 0},
                "crop": {"type": "integer", "minimum": 8},
                "model": {"type": "object"},
                "freeze": {"type": "array", "items": {"type": "string"}},
            },
            "additionalProperties": True,
        },
        "score": {
            "type": "object",
            "properties": {
                "method": {"enum": list(scoring.METHODS)},
                "epsilon": {"type": "number", "minimum": 0},
                "temperature": {"type": "number", "exclusiveMinimum": 0},
                "foreign_set": {"type": "array", "items": {"type": "integer"}},
                "mc_samples": {"type": "integer", "minimum": 2},
            },
            "additionalProperties": True,
        },
        "eval": {
            "type": "object",
            "properties": {
                "runs": {"type": "array", "items": {"type": "object"}},
                "negative_ids": {"type": "array", "items": {"type": "string"}},
                "exclusions": {"type": "array", "items": {"type": "string"}},
            },
            "additionalProperties": True,
        },
    },
    "additionalProperties": True,
}


def _threads() -> None:
    cap = os.environ.get("DENSE_OOD_THREADS")
    if cap:
        import torch

        torch.set_num_threads(max(1, int(cap)))


def load_run_config(path: Path, overrides: list[str], seed: int | None) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationFailure(f"cannot read config: {e}") from e
    for item in overrides or []:
        if "=" not in item:
            raise ValidationFailure(f"override {item!r} is not section.key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        try:
            node[keys[-1]] = json.loads(raw)
        except json.JSONDecodeError:
            node[keys[-1]] = raw
    if seed is not None:
        doc["seed"] = seed
    doc.setdefault("seed", 0)
    try:
        jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ValidationFailure(f"config schema violation: {e.message}") from e
    return doc


def write_run_record(out_dir: Path, command: str, config: dict, inputs: list[Path]) -> None:
    """Reproducibility record: command, seed, config and input hashes."""
    digest = hashlib.sha256()
    for p in sorted(str(p) for p in inputs):
        digest.update(p.encode())
        fp = Path(p)
        if fp.is_file():
            digest.update(fp.read_bytes())
    record = {
        "command": command,
        "seed": config.get("seed", 0),
        "config": config,
        "inputs_hash": digest.hexdigest(),
        "version": __version__,
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run-record.json").write_text(
        json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_worldgen(args, config) -> int:
    section = config.get("worldgen", {})
    preset = section.get("preset", "narrow")
    n = section.get("n", 16)
    kind = section.get("kind", "inlier")
    overrides = section.get("config", {})
    wc = worldgen.WorldConfig.preset(preset, seed=config["seed"], **{
        k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()
    })
    manifest = worldgen.gen_dataset(wc, n, kind, args.out)
    write_run_record(args.out, "worldgen", config, [])
    print(f"wrote {len(manifest)} {kind} samples to {args.out}")
    return 0


def cmd_synth(args, config) -> int:
    section = config.get("synth", {})
    recipe = section.get("recipe") or args.recipe
    if recipe is None:
        raise ValidationFailure("synth needs a recipe (--recipe or config)")
    dest = DatasetManifest.load(Path(args.dest_manifest))
    patches = DatasetManifest.load(Path(args.patch_manifest)) if args.patch_manifest else None
    seed = derive_seed(config["seed"], "synth", recipe)
    if recipe == "mixed_training":
        if patches is None:
            raise ValidationFailure("mixed_training needs --patch-manifest (background world)")
        manifest = synth.build_mixed_training_set(
            synth.filter_clean_inliers(dest),
            patches,
            paste_fraction=section.get("paste_fraction", 0.5),
            rng_seed=seed,
            out_dir=args.out,
            shorter_side=section.get("shorter_side", 512),
        )
    else:
        manifest = synth.build_pasted_testset(dest, patches, recipe, seed, args.out)
    write_run_record(args.out, "synth", config, [Path(args.dest_manifest)])
    print(f"recipe {recipe}: {len(manifest)} combined images in {args.out}")
    return 0


def _train_config_from(section: dict, seed: int) -> TrainConfig:
    model = FcnConfig.from_dict(section["model"]) if "model" in section else FcnConfig()
    kwargs = {
        k: section[k]
        for k in (
            "epochs", "batch_size", "lr", "lr_decay", "head_lr_ratio", "crop",
            "confidence_penalty", "val_target", "val_limit", "resize_shorter", "scale",
        )
        if k in section
    }
    freeze = None
    if "freeze" in section:
        freeze = FreezePolicy(frozenset(section["freeze"]))
    return TrainConfig(model=model, seed=seed, freeze=freeze, **kwargs)


def cmd_train(args, config) -> int:
    section = config.get("train", {})
    mode = section.get("mode", args.mode)
    tc = _train_config_from(section, config["seed"])
    manifest = DatasetManifest.load(Path(args.manifest))
    val = DatasetManifest.load(Path(args.val_manifest)) if args.val_manifest else None
    if mode == "primary":
        ckpt = train.train_primary(tc, manifest, val_manifest=val)
    elif mode == "confidence":
        ckpt = train.train_confidence(tc, manifest, val_manifest=val)
    elif mode == "discriminative":
        if not args.background_manifest:
            raise ValidationFailure("discriminative training needs --background-manifest")
        background = DatasetManifest.load(Path(args.background_manifest))
        val_bg = (
            DatasetManifest.load(Path(args.val_background_manifest))
            if args.val_background_manifest
            else None
        )
        ckpt = train.train_discriminative(
            tc, manifest, background, val_inlier=val, val_background=val_bg
        )
    else:
        raise ValidationFailure(f"unknown training mode {mode!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(out / "model.ckpt")
    write_run_record(out, "train", config, [Path(args.manifest)])
    print(f"trained {mode} model: epochs={ckpt.metadata.get('epochs_run')} -> {out / 'model.ckpt'}")
    return 0


def cmd_score(args, config) -> int:
    section = config.get("score", {})
    method = section.get("method", args.method)
    if method is None:
        raise ValidationFailure("score needs a method")
    ckpt = ModelCheckpoint.load(Path(args.checkpoint))
    manifest = DatasetManifest.load(Path(args.manifest))
    kwargs = {}
    if method == "odin":
        kwargs["odin"] = scoring.OdinConfig(
            epsilon=section.get("epsilon", 0.0),
            temperature=section.get("temperature", 1.0),
        )
    if method == "foreign":
        if "foreign_set" not in section:
            raise ValidationFailure("foreign scoring needs score.foreign_set")
        kwargs["foreign_set"] = section["foreign_set"]
        kwargs["winner"] = section.get("winner", False)
    if method == "mc_mi":
        kwargs["mc_samples"] = section.get("mc_samples", 8)
        kwargs["seed"] = config["seed"]
    path = scoring.score_manifest(method, ckpt, manifest, args.out, **kwargs)
    write_run_record(args.out, "score", config, [Path(args.checkpoint), Path(args.manifest)])
    print(f"scored {len(manifest)} images with {method}: {path}")
    return 0


def _runs_from(args, config) -> list[dict]:
    section = config.get("eval", {})
    if args.runs:
        return json.loads(Path(args.runs).read_text(encoding="utf-8"))
    if "runs" in section:
        return section["runs"]
    if not (args.scores and args.truth_manifest):
        raise ValidationFailure("eval/report needs --runs or --scores plus --truth-manifest")
    truth: dict = {"manifest": args.truth_manifest}
    if section.get("negative_ids"):
        truth.update(
            kind="imagewide",
            negative_ids=section["negative_ids"],
            exclusions=section.get("exclusions", []),
        )
    return [
        {
            "method": args.method or "scores",
            "dataset": args.dataset or "dataset",
            "protocol": "imagewide" if truth.get("kind") == "imagewide" else "masks",
            "scores_manifest": args.scores,
            "truth": truth,
        }
    ]


def cmd_eval(args, config) -> int:
    runs = _runs_from(args, config)
    for run in runs:
        if not Path(run["scores_manifest"]).exists():
            raise FileNotFoundError(f"scores manifest missing: {run['scores_manifest']}")
        row, _ = evaluation.evaluate_run(run)
        print(json.dumps(row, sort_keys=True))
    return 0


def cmd_report(args, config) -> int:
    runs = _runs_from(args, config)
    report = evaluation.build_report(runs, args.out)
    write_run_record(args.out, "report", config, [Path(r["scores_manifest"]) for r in runs])
    print(f"report with {len(report.rows)} rows -> {Path(args.out) / 'report.md'}")
    return 0


def cmd_sweep_odin(args, config) -> int:
    section = config.get("score", {})
    eps_grid = section.get("epsilon_grid", [0.0, 1e-3, 2e-3, 4e-3, 8e-3])
    t_grid = section.get("temperature_grid", [1.0, 10.0, 100.0, 1000.0])
    if not eps_grid or not t_grid:
        raise ValidationFailure("sweep grids must be non-empty")
    ckpt = ModelCheckpoint.load(Path(args.checkpoint))
    manifest = DatasetManifest.load(Path(args.manifest))
    best, table = sweep_odin(ckpt, manifest, eps_grid, t_grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"best": {"epsilon": best[0], "temperature": best[1]}, "grid": table}
    (out / "odin-sweep.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    write_run_record(out, "sweep-odin", config, [Path(args.manifest)])
    print(f"best (epsilon, temperature) = {best}")
    return 0


def sweep_odin(
    ckpt: ModelCheckpoint,
    validation_manifest: DatasetManifest,
    eps_grid: list[float],
    t_grid: list[float],
) -> tuple[tuple[float, float], list[dict]]:
    """Grid-search perturbation and temperature by validation AP.

    Ties resolve toward the smaller epsilon, then the smaller temperature.
    """
    from .evaluation import average_precision

    samples = [validation_manifest.load_sample(i) for i in range(len(validation_manifest))]
    truths = []
    for s, rec in zip(samples, validation_manifest.records):
        if s.ood is not None:
            truths.append(s.ood)
        else:
            value = 1 if rec.role == "ood" else 0
            truths.append(np.full(s.image.shape[:2], value, dtype=np.uint8))
    table = []
    best = None
    for eps in sorted(eps_grid):
        for t in sorted(t_grid):
            cfg = scoring.OdinConfig(epsilon=eps, temperature=t)
            maps = [scoring.score_odin(ckpt, s.image, cfg) for s in samples]
            ap = average_precision(maps, truths)
            table.append({"epsilon": eps, "temperature": t, "ap": ap})
            if best is None or ap > best[0] + 1e-15:
                best = (ap, eps, t)
    return (best[1], best[2]), table


def cmd_reproduce(args, config) -> int:
    from .reproduce import reproduce_paper_structure

    scale = ExperimentScale.small() if args.smoke else ExperimentScale()
    out = Path(args.out)
    reproduce_paper_structure(out, config["seed"], scale)
    write_run_record(out, "reproduce", config, [])
    print(f"table analogues under {out}")
    return 0


def cmd_experiment(args, config) -> int:
    scale = ExperimentScale.small() if args.smoke else ExperimentScale()
    res = run_seed_experiment(Path(args.out), config["seed"], scale)
    print(json.dumps(res["negative_protocol"], sort_keys=True))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="denseood", description=__doc__)
    p.add_argument("--config", type=Path, default=None, help="run-config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="config override")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("worldgen", help="generate a procedural dataset")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(fn=cmd_worldgen)

    sp = sub.add_parser("synth", help="build pasted test sets or the mixed training set")
    sp.add_argument("--recipe", choices=sorted(synth.RECIPES) + ["mixed_training"])
    sp.add_argument("--dest-manifest", required=True)
    sp.add_argument("--patch-manifest")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--mode", choices=["primary", "confidence", "discriminative"], default="primary")
    sp.add_argument("--manifest", required=True, help="training manifest (inlier side)")
    sp.add_argument("--background-manifest")
    sp.add_argument("--val-manifest")
    sp.add_argument("--val-background-manifest")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("score", help="score a manifest with one method")
    sp.add_argument("--method", choices=list(scoring.METHODS))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(fn=cmd_score)

    for name, fn in (("eval", cmd_eval), ("report", cmd_report)):
        sp = sub.add_parser(name, help=f"{name} scored runs")
        sp.add_argument("--runs", help="JSON file with run descriptors")
        sp.add_argument("--scores", help="single scores manifest")
        sp.add_argument("--truth-manifest")
        sp.add_argument("--method")
        sp.add_argument("--dataset")
        if name == "report":
            sp.add_argument("--out", type=Path, required=True)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("sweep-odin", help="validate perturbation/temperature by AP")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True, help="validation manifest with both pixel kinds")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(fn=cmd_sweep_odin)

    sp = sub.add_parser("experiment", help="run one full experiment seed")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--smoke", action="store_true", help="tiny sizes for smoke testing")
    sp.set_defaults(fn=cmd_experiment)

    sp = sub.add_parser("reproduce", help="emit the full table-structure reports")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--smoke", action="store_true", help="tiny sizes for smoke testing")
    sp.set_defaults(fn=cmd_reproduce)
    return p


def main(argv: list[str] | None = None) -> int:
    _threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    module = args.command.replace("-", "_")
    try:
        config = load_run_config(args.config, args.overrides, args.seed)
        return args.fn(args, config)
    except ValidationFailure as e:
        print(f"ERROR:cli:invalid-config {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"ERROR:{module}:missing-input {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - boundary: map to exit codes
        print(f"ERROR:{module}:runtime {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
