"""End-to-end desk-scale experiments shared by the CLI and the test suite.

One seed produces: two procedurally generated worlds (train/val/test splits
by disjoint seeds), a segmentation model, a whole-image inlier/outlier
discriminator, a union-ontology model for foreign-class scoring, and a
discriminator trained on the box-pasting mixed set; then pixel-AP numbers
for the negative-image protocol, the pasted test sets and the control sets.
Results are cached as JSON under the run directory.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import net, scoring, synth, train, worldgen
from .datamodel import (
    DatasetManifest,
    ID_LABEL,
    OOD_LABEL,
    derive_seed,
)
from .evaluation import average_precision
from .net import FcnConfig, FreezePolicy, ModelCheckpoint, transfer_backbone
from .train import TrainConfig


@dataclass(frozen=True)
class ExperimentScale:
    """Sizes and budgets for one experiment run."""

    n_train: int = 400
    n_val: int = 20
    n_test: int = 40
    inlier_size: tuple[int, int] = (128, 256)
    background_size: tuple[int, int] = (128, 128)
    crop: int = 64
    widths: tuple[int, ...] = (16, 32, 64, 96)
    batch_size: int = 8
    lr: float = 4e-4
    lr_decay: float = 0.93
    primary_epochs: int = 10
    discrim_epochs: int = 20
    foreign_epochs: int = 8
    bbox_epochs: int = 16
    # texture family the foreign-class model gets to see during training
    # (one auxiliary domain, as in joint road+indoor training); the binary
    # model trains on the full background world, so the foreign baseline's
    # ontology covers only part of the test-time outliers
    foreign_families: tuple[str, ...] = ("checker",)

    @staticmethod
    def small() -> "ExperimentScale":
        """Tiny budget for smoke tests."""
        return ExperimentScale(
            n_train=24,
            n_val=6,
            n_test=8,
            inlier_size=(64, 128),
            background_size=(64, 64),
            crop=48,
            widths=(8, 12, 16, 24),
            primary_epochs=2,
            discrim_epochs=3,
            foreign_epochs=2,
            bbox_epochs=2,
        )

    def model_config(self, class_count: int = 8, heads=("segmentation", "confidence", "ood")) -> FcnConfig:
        return FcnConfig(
            stages=len(self.widths),
            widths=self.widths,
            skip_stage=2,
            class_count=class_count,
            heads=tuple(heads),
        )

    def train_config(self, seed: int, epochs: int, model: FcnConfig) -> TrainConfig:
        return TrainConfig(
            model=model,
            epochs=epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_decay=self.lr_decay,
            crop=self.crop,
            seed=seed,
            val_limit=self.n_val,
        )


WORLD_KEYS = (
    "train_inlier",
    "train_background",
    "val_inlier",
    "val_background",
    "test_inlier",
    "test_background",
)


def generate_worlds(
    root: Path,
    seed: int,
    scale: ExperimentScale,
    variant: str = "narrow",
) -> dict[str, DatasetManifest]:
    """Generate (or reload) all six datasets for one experiment seed."""
    root = Path(root)
    manifests: dict[str, DatasetManifest] = {}
    counts = {"train": scale.n_train, "val": scale.n_val, "test": scale.n_test}
    for split in ("train", "val", "test"):
        for kind in ("inlier", "background"):
            key = f"{split}_{kind}"
            out = root / "worlds" / key
            manifest_path = out / "manifest.jsonl"
            if manifest_path.exists():
                manifests[key] = DatasetManifest.load(manifest_path)
                continue
            cfg = worldgen.WorldConfig.preset(
                variant,
                seed=derive_seed(seed, "world", key),
                inlier_size=scale.inlier_size,
                background_size=scale.background_size,
            )
            manifests[key] = worldgen.gen_dataset(cfg, counts[split], kind, out)
    return manifests


def _load_or_train(path: Path, builder) -> ModelCheckpoint:
    if Path(path).exists():
        return ModelCheckpoint.load(path)
    ckpt = builder()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(path)
    return ckpt


def train_models(
    root: Path,
    seed: int,
    scale: ExperimentScale,
    worlds: dict[str, DatasetManifest],
    with_confidence: bool = False,
) -> dict:
    """Train (or reload) the four models of one experiment seed."""
    root = Path(root)
    models_dir = root / "models"
    clean_inlier = synth.filter_clean_inliers(worlds["train_inlier"])
    out: dict = {}

    seg_heads = ("segmentation", "confidence") if with_confidence else ("segmentation",)
    out["primary"] = _load_or_train(
        models_dir / "primary.ckpt",
        lambda: train.train_primary(
            scale.train_config(
                derive_seed(seed, "primary"), scale.primary_epochs, scale.model_config(heads=seg_heads)
            ),
            clean_inlier,
            val_manifest=worlds["val_inlier"],
        ),
    )
    if with_confidence:
        out["confidence"] = _load_or_train(
            models_dir / "confidence.ckpt",
            lambda: train.train_confidence(
                scale.train_config(
                    derive_seed(seed, "confidence"), scale.primary_epochs, scale.model_config(heads=seg_heads)
                ),
                clean_inlier,
                val_manifest=worlds["val_inlier"],
            ),
        )

    # the discriminators start from the primary model's backbone and train
    # only the last stage (whose entry conv is the transition) plus the
    # inlier/outlier head, which curbs overfitting to the training textures
    ood_cfg = scale.model_config(heads=("ood",))
    ood_policy = FreezePolicy.ood_finetune(ood_cfg)

    def disc_config(key, epochs):
        cfg = scale.train_config(derive_seed(seed, key), epochs, ood_cfg)
        return dataclasses.replace(cfg, freeze=ood_policy)

    out["discrim"] = _load_or_train(
        models_dir / "discrim.ckpt",
        lambda: train.train_discriminative(
            disc_config("discrim", scale.discrim_epochs),
            worlds["train_inlier"],
            worlds["train_background"],
            val_inlier=worlds["val_inlier"],
            val_background=worlds["val_background"],
            init=transfer_backbone(out["primary"], ood_cfg, derive_seed(seed, "discrim-init")),
        ),
    )

    union_dir = root / "worlds" / "union"
    union_manifest_path = union_dir / "manifest.jsonl"
    if union_manifest_path.exists():
        union_manifest = DatasetManifest.load(union_manifest_path)
        union_classes = union_manifest.metadata["union_classes"]
    else:
        available = {r.ext.get("family") for r in worlds["train_background"].records}
        families = tuple(f for f in scale.foreign_families if f in available)
        if not families:  # tiny worlds may miss the family entirely
            families = (sorted(available)[0],)
        union_manifest, union_classes = synth.build_union_segmentation_set(
            clean_inlier,
            synth.filter_families(worlds["train_background"], families),
            class_count=8,
            out_dir=union_dir,
        )
    foreign_ids = union_manifest.metadata["foreign_classes"]
    union_cfg = scale.model_config(class_count=union_classes, heads=("segmentation",))
    out["foreign"] = _load_or_train(
        models_dir / "foreign.ckpt",
        lambda: train.train_primary(
            scale.train_config(derive_seed(seed, "foreign"), scale.foreign_epochs, union_cfg),
            union_manifest,
        ),
    )
    out["foreign_ids"] = foreign_ids

    mixed_dir = root / "worlds" / "mixed_train"
    mixed_path = mixed_dir / "manifest.jsonl"
    if mixed_path.exists():
        mixed_manifest = DatasetManifest.load(mixed_path)
    else:
        mixed_manifest = synth.build_mixed_training_set(
            clean_inlier,
            worlds["train_background"],
            paste_fraction=0.5,
            rng_seed=derive_seed(seed, "mixed-set"),
            out_dir=mixed_dir,
            shorter_side=min(scale.inlier_size),
        )
    out["bbox"] = _load_or_train(
        models_dir / "bbox.ckpt",
        lambda: train.train_discriminative(
            disc_config("bbox", scale.bbox_epochs),
            clean_inlier,
            mixed_manifest,
            val_inlier=worlds["val_inlier"],
            val_background=worlds["val_background"],
            init=transfer_backbone(out["primary"], ood_cfg, derive_seed(seed, "bbox-init")),
        ),
    )
    return out


# ---------------------------------------------------------------------------
# scoring helpers (in-memory evaluation)


def _score_fn(method: str, models: dict):
    if method == "max_softmax":
        ck = models["primary"]
        return lambda img: scoring.score_max_softmax(net.forward_segmentation(ck, img))
    if method == "confidence":
        ck = models["confidence"]
        return lambda img: scoring.score_confidence(net.forward_confidence(ck, img)[1])
    if method == "foreign":
        ck = models["foreign"]
        ids = models["foreign_ids"]
        return lambda img: scoring.score_foreign_class(net.forward_segmentation(ck, img), ids)
    if method in ("discrim", "bbox"):
        ck = models[method]
        return lambda img: scoring.score_discriminative(net.forward_ood(ck, img))
    raise ValueError(f"unknown method {method!r}")


def evaluate_negative_protocol(
    models: dict,
    worlds: dict[str, DatasetManifest],
    methods: tuple[str, ...] = ("max_softmax", "foreign", "discrim"),
) -> dict[str, float]:
    """Image-wide protocol: held-out street scenes are all-inlier, held-out
    background images all-outlier; returns pooled pixel AP per method."""
    pairs = []  # (image, truth)
    for manifest, label in ((worlds["test_inlier"], ID_LABEL), (worlds["test_background"], OOD_LABEL)):
        for i in range(len(manifest)):
            img = manifest.load_sample(i).image
            pairs.append((img, np.full(img.shape[:2], label, dtype=np.uint8)))
    out = {}
    for method in methods:
        fn = _score_fn(method, models)
        scores = [fn(img) for img, _ in pairs]
        truths = [t for _, t in pairs]
        out[method] = average_precision(scores, truths)
    return out


def _masked_ap(manifest: DatasetManifest, fn) -> float:
    scores, truths = [], []
    for i in range(len(manifest)):
        s = manifest.load_sample(i)
        scores.append(fn(s.image))
        truths.append(s.ood)
    return average_precision(scores, truths)


def build_eval_sets(
    root: Path,
    seed: int,
    worlds: dict[str, DatasetManifest],
    recipes: tuple[str, ...] = ("foreign_paste_10", "self_paste"),
) -> dict[str, DatasetManifest]:
    """Pasted/selected evaluation sets over the held-out worlds."""
    root = Path(root)
    clean_test = synth.filter_clean_inliers(worlds["test_inlier"])
    sources = {
        "foreign_paste_10": worlds["test_background"],
        "foreign_paste_1": worlds["test_background"],
        "same_set_paste": None,
        "cross_set_paste": None,  # filled by reproduce for the two-world case
        "self_paste": None,
        "genuine_foreign": None,
    }
    sets = {}
    for name in recipes:
        out = root / "evalsets" / name
        manifest_path = out / "manifest.jsonl"
        if manifest_path.exists():
            sets[name] = DatasetManifest.load(manifest_path)
            continue
        dest = worlds["test_inlier"] if name == "genuine_foreign" else clean_test
        # control sets get extra pastes so their small positive fraction is
        # estimated from enough pixels
        n_outputs = 2 * len(dest) if name.endswith("_paste") else None
        sets[name] = synth.build_pasted_testset(
            dest,
            sources.get(name),
            name,
            derive_seed(seed, "evalset", name),
            out,
            n_outputs=n_outputs,
        )
    return sets


def run_seed_experiment(
    root: Path,
    seed: int,
    scale: Optional[ExperimentScale] = None,
) -> dict:
    """One full seed: worlds, four models, and the headline AP numbers."""
    scale = scale or ExperimentScale()
    root = Path(root)
    results_path = root / "results.json"
    if results_path.exists():
        return json.loads(results_path.read_text())

    worlds = generate_worlds(root, seed, scale)
    models = train_models(root, seed, scale, worlds)
    negative = evaluate_negative_protocol(models, worlds)
    sets = build_eval_sets(root, seed, worlds)

    pasted = {}
    for method in ("max_softmax", "discrim", "bbox"):
        pasted[method] = _masked_ap(sets["foreign_paste_10"], _score_fn(method, models))

    control = {"prevalence": _prevalence(sets["self_paste"])}
    for method in ("max_softmax", "foreign", "discrim", "bbox"):
        control[method] = _masked_ap(sets["self_paste"], _score_fn(method, models))

    results = {
        "seed": seed,
        "scale": dataclasses.asdict(scale),
        "negative_protocol": negative,
        "pasted_10": pasted,
        "self_paste_control": control,
        "epochs": {k: models[k].metadata.get("epochs_run") for k in ("primary", "discrim", "foreign", "bbox")},
    }
    root.mkdir(parents=True, exist_ok=True)
    results_path.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return results


def _prevalence(manifest: DatasetManifest) -> float:
    pos = 0
    total = 0
    for i in range(len(manifest)):
        s = manifest.load_sample(i)
        pos += int((s.ood == OOD_LABEL).sum())
        total += s.ood.size
    return pos / total if total else float("nan")
