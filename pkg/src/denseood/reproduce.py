"""Full experiment matrix: one report per table analogue.

Rows mirror the structure of the upstream experiment grid: max-softmax and
confidence baselines, the foreign-class model, whole-image discriminators
trained on three inlier-world variants, and the box-pasting discriminator,
evaluated on the negative-image protocol (complete and selection columns),
the pasted foreign sets, the genuine-foreign selection and the three
pasted-inlier control sets.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from . import net, scoring, synth, train, worldgen
from .datamodel import (
    DatasetManifest,
    ManifestRecord,
    derive_seed,
    save_image,
)
from .evaluation import EvalReport, build_report
from .experiments import ExperimentScale, _load_or_train
from .net import ModelCheckpoint


def alter_image(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Mild distortion of a valid scene (channel swap plus vignette); such
    images stay structurally inlier-like and are ambiguous as negatives."""
    perm = rng.permutation(3)
    out = image[:, :, perm].copy()
    h, w = out.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    d = np.sqrt(((ys - h / 2) / h) ** 2 + ((xs - w / 2) / w) ** 2).astype(np.float32)
    out *= (1.05 - 0.6 * d)[:, :, None]
    return np.clip(out, 0.0, 1.0)


def _gen(root, key, cfg, n, kind):
    out = Path(root) / "worlds" / key
    if (out / "manifest.jsonl").exists():
        return DatasetManifest.load(out / "manifest.jsonl")
    return worldgen.gen_dataset(cfg, n, kind, out)


def _build_protocol_manifest(root: Path, seed: int, test_inlier, test_background, n_altered: int = 5):
    """Negative-image test set: street scenes are negatives, background
    images plus a few altered street scenes are positives."""
    out = Path(root) / "protocol"
    manifest_path = out / "manifest.jsonl"
    if manifest_path.exists():
        m = DatasetManifest.load(manifest_path)
        return m, m.metadata["negative_ids"], m.metadata["altered_ids"]
    (out / "altered").mkdir(parents=True, exist_ok=True)
    records = []

    def link(manifest, rec):
        rel = os.path.relpath(manifest.resolve(rec.image), out)
        records.append(ManifestRecord(rec.id, rel, None, None, rec.role, {}))

    for rec in test_inlier.records:
        link(test_inlier, rec)
    for rec in test_background.records:
        link(test_background, rec)
    rng = np.random.default_rng(derive_seed(seed, "altered"))
    altered_ids = []
    for k in range(n_altered):
        src = test_inlier.load_sample(k)
        img = alter_image(src.image, rng)
        rel = f"altered/{k:03d}.png"
        save_image(out / rel, img)
        sid = f"altered-{k:03d}"
        altered_ids.append(sid)
        records.append(ManifestRecord(sid, rel, None, None, "ood", {"altered_from": src.id}))

    negative_ids = [r.id for r in test_background.records] + altered_ids
    manifest = DatasetManifest(
        records=records,
        metadata={
            "name": "negative-protocol",
            "seed": seed,
            "generator_version": "1",
            "negative_ids": negative_ids,
            "altered_ids": altered_ids,
        },
    )
    manifest.save(manifest_path)
    return manifest, negative_ids, altered_ids


def _score(root, tag, method, ckpt, manifest, **kwargs) -> Path:
    out = Path(root) / "scores" / tag
    path = out / "scores.jsonl"
    if not path.exists():
        scoring.score_manifest(method, ckpt, manifest, out, **kwargs)
    return path


def _pivot_markdown(report: EvalReport, datasets: list[str]) -> str:
    methods = []
    for row in report.rows:
        if row["method"] not in methods:
            methods.append(row["method"])
    lines = ["| model | " + " | ".join(datasets) + " |", "|" + "---|" * (len(datasets) + 1)]
    for m in methods:
        cells = []
        for d in datasets:
            try:
                cells.append(f"{report.lookup(m, d)['ap']:.4f}")
            except KeyError:
                cells.append("-")
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def reproduce_paper_structure(out_dir: Path, seed: int, scale: ExperimentScale) -> dict:
    """Emit table analogues 1-4, 6 and 7 plus PR curves under out_dir."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)

    size = dict(inlier_size=scale.inlier_size, background_size=scale.background_size)
    w_narrow = lambda key: worldgen.WorldConfig.preset("narrow", seed=derive_seed(seed, key), **size)
    w_wide = lambda key: worldgen.WorldConfig.preset("wide", seed=derive_seed(seed, key), **size)

    narrow_train = _gen(root, "narrow_train", w_narrow("narrow_train"), scale.n_train, "inlier")
    wide_train = _gen(root, "wide_train", w_wide("wide_train"), scale.n_train, "inlier")
    distorted_val = _gen(
        root, "distorted_val",
        worldgen.WorldConfig.preset("distorted", seed=derive_seed(seed, "distorted_val"), **size),
        max(4, scale.n_val), "inlier",
    )
    background = _gen(root, "background_train", w_narrow("background_train"), scale.n_train, "background")
    val_inlier = _gen(root, "val_inlier", w_narrow("val_inlier"), scale.n_val, "inlier")
    val_background = _gen(root, "val_background", w_narrow("val_background"), scale.n_val, "background")
    test_inlier = _gen(root, "test_inlier", w_narrow("test_inlier"), scale.n_test, "inlier")
    test_background = _gen(root, "test_background", w_narrow("test_background"), scale.n_test, "background")
    # pool of scenes guaranteed to contain a foreign shape (selection source)
    animals_cfg = worldgen.WorldConfig.preset(
        "narrow", seed=derive_seed(seed, "animals"), foreign_rate=1.0, **size
    )
    animals_pool = _gen(root, "animals_pool", animals_cfg, max(12, scale.n_test // 2), "inlier")

    # combined manifest: narrow train + distorted extras (challenge-val add-on)
    combo_dir = root / "worlds" / "narrow_plus"
    combo_path = combo_dir / "manifest.jsonl"
    if combo_path.exists():
        narrow_plus = DatasetManifest.load(combo_path)
    else:
        combo_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for m in (narrow_train, distorted_val):
            for rec in m.records:
                def rel(p):
                    return None if p is None else os.path.relpath(m.resolve(p), combo_dir)
                records.append(ManifestRecord(rec.id + ("+d" if m is distorted_val else ""),
                                              rel(rec.image), rel(rec.semantic), rel(rec.ood),
                                              rec.role, dict(rec.ext)))
        narrow_plus = DatasetManifest(records=records, metadata={"name": "narrow+distorted", "seed": seed,
                                                                 "generator_version": "1"})
        narrow_plus.save(combo_path)

    models_dir = root / "models"
    seg_cfg = scale.model_config(heads=("segmentation", "confidence"))
    ood_cfg = scale.model_config(heads=("ood",))
    tc = lambda key, epochs, cfg: scale.train_config(derive_seed(seed, key), epochs, cfg)

    primary = _load_or_train(models_dir / "primary.ckpt", lambda: train.train_primary(
        tc("primary", scale.primary_epochs, seg_cfg), synth.filter_clean_inliers(narrow_train),
        val_manifest=val_inlier))
    primary_plus = _load_or_train(models_dir / "primary_plus.ckpt", lambda: train.train_primary(
        tc("primary_plus", scale.primary_epochs, seg_cfg), synth.filter_clean_inliers(narrow_plus),
        val_manifest=val_inlier))
    confmodel = _load_or_train(models_dir / "confidence.ckpt", lambda: train.train_confidence(
        tc("confidence", scale.primary_epochs, seg_cfg), synth.filter_clean_inliers(narrow_train),
        val_manifest=val_inlier))

    def disc(key, inlier_manifest, background_manifest, epochs):
        return _load_or_train(models_dir / f"{key}.ckpt", lambda: train.train_discriminative(
            tc(key, epochs, ood_cfg), inlier_manifest, background_manifest,
            val_inlier=val_inlier, val_background=val_background))

    discrim_narrow = disc("discrim_narrow", narrow_train, background, scale.discrim_epochs)
    discrim_plus = disc("discrim_plus", narrow_plus, background, scale.discrim_epochs)
    discrim_wide = disc("discrim_wide", wide_train, background, scale.discrim_epochs)

    union_dir = root / "worlds" / "union"
    if (union_dir / "manifest.jsonl").exists():
        union_manifest = DatasetManifest.load(union_dir / "manifest.jsonl")
        union_classes = union_manifest.metadata["union_classes"]
    else:
        union_manifest, union_classes = synth.build_union_segmentation_set(
            synth.filter_clean_inliers(narrow_train),
            synth.filter_families(background, scale.foreign_families),
            8, union_dir)
    foreign_ids = union_manifest.metadata["foreign_classes"]
    foreign_model = _load_or_train(models_dir / "foreign.ckpt", lambda: train.train_primary(
        tc("foreign", scale.foreign_epochs,
           scale.model_config(class_count=union_classes, heads=("segmentation",))),
        union_manifest))

    mixed_dir = root / "worlds" / "mixed_train"
    if (mixed_dir / "manifest.jsonl").exists():
        mixed = DatasetManifest.load(mixed_dir / "manifest.jsonl")
    else:
        mixed = synth.build_mixed_training_set(
            synth.filter_clean_inliers(wide_train), background, 0.5,
            derive_seed(seed, "mixed"), mixed_dir, shorter_side=min(scale.inlier_size))
    bbox_model = disc("bbox", synth.filter_clean_inliers(wide_train), mixed, scale.bbox_epochs)

    # ---- evaluation sets -------------------------------------------------
    protocol, negative_ids, altered_ids = _build_protocol_manifest(
        root, seed, test_inlier, test_background)

    clean_test = synth.filter_clean_inliers(test_inlier)
    evalsets = {}
    recipe_args = {
        "foreign_paste_10": (clean_test, test_background),
        "foreign_paste_1": (clean_test, test_background),
        "genuine_foreign": (animals_pool, None),
        "same_set_paste": (clean_test, None),
        "cross_set_paste": (clean_test, synth.filter_clean_inliers(wide_train)),
        "self_paste": (clean_test, None),
    }
    for name, (dest, src) in recipe_args.items():
        out = root / "evalsets" / name
        if (out / "manifest.jsonl").exists():
            evalsets[name] = DatasetManifest.load(out / "manifest.jsonl")
        else:
            evalsets[name] = synth.build_pasted_testset(
                dest, src, name, derive_seed(seed, "evalset", name), out)

    # ---- score everything ------------------------------------------------
    model_rows = [
        ("ms-narrow", "max_softmax", primary, {}),
        ("ms-narrow+d", "max_softmax", primary_plus, {}),
        ("ms-conf", "max_softmax", confmodel, {}),
        ("conf", "confidence", confmodel, {}),
        ("foreign", "foreign", foreign_model, {"foreign_set": foreign_ids}),
        ("discrim-narrow", "discrim", discrim_narrow, {}),
        ("discrim-narrow+d", "discrim", discrim_plus, {}),
        ("discrim-wide", "discrim", discrim_wide, {}),
        ("discrim-bbox", "discrim", bbox_model, {}),
    ]

    def runs_for(dataset_name, manifest, truth, rows):
        out = []
        for tag, method, ckpt, kwargs in rows:
            spath = _score(root, f"{tag}--{dataset_name}", method, ckpt, manifest, **kwargs)
            for protocol_name, extra in truth:
                out.append({
                    "method": tag,
                    "dataset": dataset_name,
                    "protocol": protocol_name,
                    "scores_manifest": str(spath),
                    "truth": extra,
                })
        return out

    proto_truth = lambda exclude: {
        "kind": "imagewide",
        "manifest": str(root / "protocol" / "manifest.jsonl"),
        "negative_ids": negative_ids,
        "exclusions": altered_ids if exclude else [],
    }
    both_protocols = [("selection", proto_truth(True)), ("complete", proto_truth(False))]
    mask_truth = lambda name: [("masks", {"kind": "masks",
                                          "manifest": str(root / "evalsets" / name / "manifest.jsonl")})]

    tables: dict[str, EvalReport] = {}

    def table(name, runs, datasets):
        report = build_report(runs, root / "tables" / name)
        (root / "tables" / name / "pivot.md").write_text(
            _pivot_markdown(report, datasets), encoding="utf-8")
        tables[name] = report

    table("table1_max_softmax",
          runs_for("negative", protocol, both_protocols,
                   [r for r in model_rows if r[0].startswith("ms-narrow")]),
          ["negative"])
    table("table2_confidence",
          runs_for("negative", protocol, both_protocols,
                   [r for r in model_rows if r[0] in ("ms-conf", "conf")]),
          ["negative"])
    table("table3_foreign",
          runs_for("negative", protocol, both_protocols,
                   [r for r in model_rows if r[0] == "foreign"]),
          ["negative"])
    table("table4_discriminative",
          runs_for("negative", protocol, both_protocols,
                   [r for r in model_rows if r[0].startswith("discrim-") and r[0] != "discrim-bbox"]),
          ["negative"])

    t6_rows = model_rows
    t6_runs = []
    for ds in ("foreign_paste_10", "foreign_paste_1", "genuine_foreign"):
        t6_runs += runs_for(ds, evalsets[ds], mask_truth(ds), t6_rows)
    t6_runs += runs_for("negative", protocol, [both_protocols[0]], t6_rows)
    table("table6_pasted", t6_runs,
          ["foreign_paste_10", "foreign_paste_1", "genuine_foreign", "negative"])

    t7_runs = []
    for ds in ("same_set_paste", "cross_set_paste", "self_paste"):
        t7_runs += runs_for(ds, evalsets[ds], mask_truth(ds), t6_rows)
    table("table7_controls", t7_runs, ["same_set_paste", "cross_set_paste", "self_paste"])

    summary = {
        name: [
            {k: row[k] for k in ("method", "dataset", "protocol", "ap")}
            for row in report.rows
        ]
        for name, report in tables.items()
    }
    (root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
