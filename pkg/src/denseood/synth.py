"""Copy-paste dataset synthesis.

Builds the pasted evaluation sets (foreign objects over street scenes plus
the pasted-inlier control sets) and the mixed training set where background
objects are either kept whole (object box labeled outlier, rest ignored) or
pasted onto clean street scenes at a fixed coverage.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .datamodel import (
    DatasetManifest,
    GENERATOR_VERSION,
    ID_LABEL,
    IGNORE,
    ManifestRecord,
    OOD_LABEL,
    Sample,
    derive_seed,
    load_mask,
    resize,
    resize_image,
    resize_mask,
    save_image,
    save_mask,
)
from .worldgen import CAR, PERSON

COVERAGE_SLACK = 1.02  # realized coverage may overshoot the target by 2%

LABEL_POLICIES = ("ood", "id", "ignore_outside_bbox")


class RecipeInfeasibleError(ValueError):
    """A paste cannot satisfy its recipe inside the destination."""


@dataclass
class Patch:
    """Pixels plus opacity cut from a source image."""

    pixels: np.ndarray  # (h, w, 3) float32
    alpha: np.ndarray  # (h, w) bool
    source_id: str

    def __post_init__(self):
        if self.alpha.shape != self.pixels.shape[:2]:
            raise ValueError("alpha shape must match patch pixels")
        if not self.alpha.any():
            raise ValueError("patch must have at least one opaque pixel")

    @property
    def opaque_count(self) -> int:
        return int(self.alpha.sum())


@dataclass(frozen=True)
class PasteRecipe:
    coverage_target: Optional[float]  # drives acceptance when resizing
    min_coverage: Optional[float]  # drives acceptance when not resizing
    resize: bool
    label_policy: str

    def __post_init__(self):
        if self.label_policy not in LABEL_POLICIES:
            raise ValueError(f"label_policy must be one of {LABEL_POLICIES}")
        if self.resize:
            if self.coverage_target is None or self.min_coverage is not None:
                raise ValueError("resize recipes take coverage_target only")
            if not 0 < self.coverage_target <= 1:
                raise ValueError("coverage_target must be in (0, 1]")
        else:
            if self.min_coverage is None or self.coverage_target is not None:
                raise ValueError("no-resize recipes take min_coverage only")
            if not 0 < self.min_coverage < 1:
                raise ValueError("min_coverage must be in (0, 1)")


def extract_patch(sample: Sample, region) -> Patch:
    """Cut a patch: `region` is a bbox (r0, c0, r1, c1) or a boolean mask.

    Bbox mode yields an all-opaque rectangle; mask mode keeps the instance
    silhouette as alpha, cropped to its tight bounding box.
    """
    h, w = sample.image.shape[:2]
    if isinstance(region, np.ndarray):
        mask = region.astype(bool)
        if mask.shape != (h, w):
            raise ValueError("instance mask shape must match the sample")
        if not mask.any():
            raise ValueError("empty instance mask")
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        r0, r1 = rows[0], rows[-1] + 1
        c0, c1 = cols[0], cols[-1] + 1
        return Patch(
            pixels=sample.image[r0:r1, c0:c1].copy(),
            alpha=mask[r0:r1, c0:c1].copy(),
            source_id=sample.id,
        )
    r0, c0, r1, c1 = (int(v) for v in region)
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ValueError(f"bbox {region} empty or outside {h}x{w} sample")
    return Patch(
        pixels=sample.image[r0:r1, c0:c1].copy(),
        alpha=np.ones((r1 - r0, c1 - c0), dtype=bool),
        source_id=sample.id,
    )


def _resized_alpha(alpha: np.ndarray, nh: int, nw: int) -> np.ndarray:
    return resize_mask(alpha.astype(np.uint8) * 255, nh, nw) > 127


def _fit_patch_to_coverage(patch: Patch, dest_shape, coverage_target: float) -> Patch:
    """Rescale so the opaque area lands in [target, target * 1.02] of dest.

    Integer dimensions cannot hit an exact pixel count, so the search walks
    outward from the aspect-true size, nudging each side a few pixels until
    the realized count falls inside the window and the patch fits.
    """
    dh, dw = dest_shape
    dest_px = dh * dw
    lo = coverage_target * dest_px
    hi = COVERAGE_SLACK * coverage_target * dest_px
    ph, pw = patch.alpha.shape
    scale = math.sqrt(lo / patch.opaque_count)
    ideal_h = max(1.0, ph * scale)
    ideal_w = max(1.0, pw * scale)

    tried = []
    for radius in range(0, 7):
        candidates = []
        for a in range(-radius, radius + 1):
            for b in range(-radius, radius + 1):
                if max(abs(a), abs(b)) != radius:
                    continue
                candidates.append((abs(a) + abs(b), a, b))
        for _, a, b in sorted(candidates):
            nh = int(round(ideal_h)) + a
            nw = int(round(ideal_w)) + b
            if nh < 1 or nw < 1 or nh > dh or nw > dw:
                continue
            alpha = _resized_alpha(patch.alpha, nh, nw)
            count = int(alpha.sum())
            tried.append(count)
            if lo <= count <= hi:
                return Patch(
                    pixels=resize_image(patch.pixels, nh, nw),
                    alpha=alpha,
                    source_id=patch.source_id,
                )
    raise RecipeInfeasibleError(
        f"cannot scale patch from {patch.source_id} to cover"
        f" [{lo:.0f}, {hi:.0f}] px of a {dh}x{dw} destination (tried {sorted(set(tried))})"
    )


def paste(dest: Sample, patch: Patch, recipe: PasteRecipe, rng_seed: int) -> Sample:
    """Composite `patch` onto `dest` at a seeded uniform position.

    Updates the outlier mask under the opaque region according to the
    recipe's label policy and blanks the semantic labels there so the
    pasted pixels never train the segmentation task.
    """
    if recipe.label_policy == "ignore_outside_bbox":
        raise ValueError("ignore_outside_bbox applies to whole images, not pastes")
    dh, dw = dest.image.shape[:2]
    if recipe.resize:
        patch = _fit_patch_to_coverage(patch, (dh, dw), recipe.coverage_target)
    else:
        if patch.opaque_count < recipe.min_coverage * dh * dw:
            raise RecipeInfeasibleError(
                f"patch covers {patch.opaque_count / (dh * dw):.4%}"
                f" < min coverage {recipe.min_coverage:.4%}"
            )
    ph, pw = patch.alpha.shape
    if ph > dh or pw > dw:
        raise RecipeInfeasibleError(f"patch {ph}x{pw} larger than destination {dh}x{dw}")

    rng = np.random.default_rng(rng_seed)
    top = int(rng.integers(0, dh - ph + 1))
    left = int(rng.integers(0, dw - pw + 1))
    sl = (slice(top, top + ph), slice(left, left + pw))

    image = dest.image.copy()
    image[sl][patch.alpha] = patch.pixels[patch.alpha]

    ood = np.full((dh, dw), ID_LABEL, dtype=np.uint8) if dest.ood is None else dest.ood.copy()
    paste_label = OOD_LABEL if recipe.label_policy == "ood" else ID_LABEL
    ood[sl][patch.alpha] = paste_label

    semantic = None
    if dest.semantic is not None:
        semantic = dest.semantic.copy()
        semantic[sl][patch.alpha] = IGNORE

    placed = np.zeros((dh, dw), dtype=bool)
    placed[sl] = patch.alpha
    meta = dict(dest.meta)
    meta.update(
        {
            "paste_source": patch.source_id,
            "paste_offset": (top, left),
            "paste_px": patch.opaque_count,
            "_paste_mask": placed,
        }
    )
    return Sample(id=dest.id, image=image, semantic=semantic, ood=ood, meta=meta)


# ---------------------------------------------------------------------------
# recipe catalogue for evaluation sets


_OBJECT_CLASSES = (CAR, PERSON)

RECIPES = {
    # foreign background objects pasted over street scenes (evaluation sets)
    "foreign_paste_10": dict(source="object", resize=True, coverage_target=0.10, label="ood", control=False),
    "foreign_paste_1": dict(source="object", resize=False, min_coverage=0.01, label="ood", control=False),
    # inlier content pasted over inlier scenes (control sets)
    "same_set_paste": dict(source="dest_instance", resize=False, min_coverage=0.005, label="id", control=True),
    "cross_set_paste": dict(source="source_instance", resize=False, min_coverage=0.005, label="id", control=True),
    "self_paste": dict(source="self_instance", resize=False, min_coverage=0.005, label="id", control=True),
    # genuine foreign shapes already present in the scenes (no pasting)
    "genuine_foreign": dict(source=None, min_frac=0.007, control=False),
}


def _instances(sample: Sample, min_px: int) -> list[np.ndarray]:
    """Connected car/person components at least min_px large."""
    out = []
    if sample.semantic is None:
        return out
    for cls in _OBJECT_CLASSES:
        labels, n = ndimage.label(sample.semantic == cls)
        for k in range(1, n + 1):
            mask = labels == k
            if mask.sum() >= min_px:
                out.append(mask)
    return out


def _resolve_object_patch(manifest: DatasetManifest, index: int) -> Patch:
    rec = manifest.records[index]
    sample = manifest.load_sample(index)
    if "object_mask" in rec.ext:
        mask = load_mask(manifest.resolve(rec.ext["object_mask"])) > 127
        if mask.any():
            return extract_patch(sample, mask)
    if "bbox" in rec.ext:
        return extract_patch(sample, rec.ext["bbox"])
    raise ValueError(f"record {rec.id} carries neither object_mask nor bbox")


def build_pasted_testset(
    dest_manifest: DatasetManifest,
    patch_source_manifest: Optional[DatasetManifest],
    recipe_name: str,
    rng_seed: int,
    out_dir: Path,
    n_outputs: Optional[int] = None,
) -> DatasetManifest:
    """Emit one combined image per accepted (patch, destination) pair.

    The written mask marks the pasted region (the foreign region for
    `genuine_foreign`); for control recipes it marks pasted *inlier* content
    and is tagged `control` so it is never mistaken for outlier ground truth.
    """
    if recipe_name not in RECIPES:
        raise ValueError(f"unknown recipe {recipe_name!r}; known: {sorted(RECIPES)}")
    spec = RECIPES[recipe_name]
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "ood").mkdir(exist_ok=True)

    records: list[ManifestRecord] = []
    rejections: list[str] = []

    def emit(image, mask, dest_id, source_id, coverage):
        k = len(records)
        img_rel = f"images/{k:06d}.png"
        ood_rel = f"ood/{k:06d}.png"
        save_image(out_dir / img_rel, image)
        save_mask(out_dir / ood_rel, mask.astype(np.uint8))
        ext = {
            "dest_id": dest_id,
            "source_id": source_id,
            "coverage": round(float(coverage), 5),
        }
        if spec["control"]:
            ext["control"] = True
        records.append(
            ManifestRecord(f"{recipe_name}-{k:06d}", img_rel, None, ood_rel, "mixed", ext)
        )

    if recipe_name == "genuine_foreign":
        for i, rec in enumerate(dest_manifest.records):
            if not rec.ext.get("foreign_px"):
                continue
            sample = dest_manifest.load_sample(i)
            frac = rec.ext["foreign_px"] / (sample.height * sample.width)
            if frac < spec["min_frac"]:
                rejections.append(f"{rec.id}: foreign region {frac:.3%} below {spec['min_frac']:.1%}")
                continue
            emit(sample.image, sample.ood == OOD_LABEL, rec.id, rec.id, frac)
    elif spec["source"] == "object":
        recipe = PasteRecipe(
            coverage_target=spec.get("coverage_target"),
            min_coverage=spec.get("min_coverage"),
            resize=spec["resize"],
            label_policy=spec["label"],
        )
        n = len(patch_source_manifest) if n_outputs is None else min(n_outputs, len(patch_source_manifest))
        for i in range(n):
            pair_seed = derive_seed(rng_seed, recipe_name, i)
            rng = np.random.default_rng(pair_seed)
            dest_idx = int(rng.integers(0, len(dest_manifest)))
            dest = dest_manifest.load_sample(dest_idx)
            try:
                patch = _resolve_object_patch(patch_source_manifest, i)
                combined = paste(dest, patch, recipe, derive_seed(pair_seed, "place"))
            except (RecipeInfeasibleError, ValueError) as e:
                rejections.append(f"pair {i}: {e}")
                continue
            mask = combined.meta["_paste_mask"]
            emit(combined.image, mask, dest.id, patch.source_id, mask.mean())
    else:
        # instance pastes between (or within) street scenes
        recipe = PasteRecipe(
            coverage_target=None,
            min_coverage=spec["min_coverage"],
            resize=False,
            label_policy=spec["label"],
        )
        n = len(dest_manifest) if n_outputs is None else n_outputs
        for i in range(n):
            pair_seed = derive_seed(rng_seed, recipe_name, i)
            rng = np.random.default_rng(pair_seed)
            dest_idx = int(rng.integers(0, len(dest_manifest)))
            dest = dest_manifest.load_sample(dest_idx)
            if spec["source"] == "self_instance":
                src = dest
            elif spec["source"] == "dest_instance":
                src_idx = int(rng.integers(0, len(dest_manifest)))
                while src_idx == dest_idx and len(dest_manifest) > 1:
                    src_idx = int(rng.integers(0, len(dest_manifest)))
                src = dest_manifest.load_sample(src_idx)
            else:
                if patch_source_manifest is None:
                    raise ValueError(f"recipe {recipe_name} needs a patch source manifest")
                src = patch_source_manifest.load_sample(int(rng.integers(0, len(patch_source_manifest))))
            min_px = int(math.ceil(spec["min_coverage"] * dest.height * dest.width))
            instances = _instances(src, min_px)
            if not instances:
                rejections.append(f"pair {i}: no instance >= {min_px} px in {src.id}")
                continue
            # area-weighted draw: a random eligible pixel's instance
            areas = np.array([m.sum() for m in instances], dtype=np.float64)
            mask = instances[int(rng.choice(len(instances), p=areas / areas.sum()))]
            try:
                patch = extract_patch(src, mask)
                combined = paste(dest, patch, recipe, derive_seed(pair_seed, "place"))
            except (RecipeInfeasibleError, ValueError) as e:
                rejections.append(f"pair {i}: {e}")
                continue
            placed = combined.meta["_paste_mask"]
            emit(combined.image, placed, dest.id, src.id, placed.mean())

    if not records:
        raise RecipeInfeasibleError(
            f"recipe {recipe_name} accepted no pairs; rejections: " + "; ".join(rejections[:10])
        )
    manifest = DatasetManifest(
        records=records,
        metadata={
            "name": recipe_name,
            "seed": rng_seed,
            "generator_version": GENERATOR_VERSION,
            "recipe": recipe_name,
            "rejections": len(rejections),
        },
    )
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


# ---------------------------------------------------------------------------
# mixed training set (background objects whole or pasted)


def flagged_foreign(rec: ManifestRecord) -> bool:
    return bool(rec.ext.get("foreign_px")) or rec.role == "mixed"


def filter_clean_inliers(manifest: DatasetManifest) -> DatasetManifest:
    """Drop scenes that contain genuine foreign shapes."""
    records = [r for r in manifest.records if not flagged_foreign(r)]
    meta = dict(manifest.metadata)
    meta["filtered"] = "no-foreign"
    return DatasetManifest(records=records, metadata=meta, root=manifest.root)


def filter_families(manifest: DatasetManifest, families) -> DatasetManifest:
    """Keep only background records from the given texture families."""
    keep = set(families)
    records = [r for r in manifest.records if r.ext.get("family") in keep]
    if not records:
        raise ValueError(f"no records from families {sorted(keep)}")
    meta = dict(manifest.metadata)
    meta["filtered"] = "families:" + ",".join(sorted(keep))
    return DatasetManifest(records=records, metadata=meta, root=manifest.root)


def build_mixed_training_set(
    inlier_manifest: DatasetManifest,
    background_manifest: DatasetManifest,
    paste_fraction: float,
    rng_seed: int,
    out_dir: Path,
    shorter_side: int = 512,
) -> DatasetManifest:
    """Consume each background image exactly once: whole or pasted.

    Whole images keep only the object box labeled outlier (everything else
    ignored); pasted images put the box, rescaled to 5% of the street scene,
    over a clean scene, labeling inside outlier and outside inlier.
    """
    if not 0 <= paste_fraction <= 1:
        raise ValueError("paste_fraction must be in [0, 1]")
    flagged = [r.id for r in inlier_manifest.records if flagged_foreign(r)]
    if flagged:
        raise ValueError(
            f"inlier manifest contains foreign-flagged scenes: {flagged[:5]}"
            " (filter them out first)"
        )
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "ood").mkdir(exist_ok=True)

    paste_recipe = PasteRecipe(coverage_target=0.05, min_coverage=None, resize=True, label_policy="ood")
    records = []
    for i, rec in enumerate(background_manifest.records):
        if "bbox" not in rec.ext:
            raise ValueError(f"background record {rec.id} has no bbox")
        item_seed = derive_seed(rng_seed, "mixed", i)
        rng = np.random.default_rng(item_seed)
        use_paste = rng.random() < paste_fraction
        if use_paste:
            dest_idx = int(rng.integers(0, len(inlier_manifest)))
            dest = inlier_manifest.load_sample(dest_idx)
            bg = background_manifest.load_sample(i)
            patch = extract_patch(bg, rec.ext["bbox"])
            combined = paste(dest, patch, paste_recipe, derive_seed(item_seed, "place"))
            sample = Sample(id=f"mixed-{i:06d}", image=combined.image, ood=combined.ood)
            mode = "paste"
            role = "mixed"
            dest_id = dest.id
        else:
            bg = background_manifest.load_sample(i)
            ood = np.full(bg.image.shape[:2], IGNORE, dtype=np.uint8)
            r0, c0, r1, c1 = rec.ext["bbox"]
            ood[r0:r1, c0:c1] = OOD_LABEL
            sample = Sample(id=f"mixed-{i:06d}", image=bg.image, ood=ood)
            mode = "whole"
            role = "ood"
            dest_id = None

        if min(sample.height, sample.width) != shorter_side:
            sample = resize(sample, shorter_side)
        img_rel = f"images/{i:06d}.png"
        ood_rel = f"ood/{i:06d}.png"
        save_image(out_dir / img_rel, sample.image)
        save_mask(out_dir / ood_rel, sample.ood)
        ext = {"background_id": rec.id, "mode": mode}
        if dest_id:
            ext["dest_id"] = dest_id
        records.append(ManifestRecord(sample.id, img_rel, None, ood_rel, role, ext))

    manifest = DatasetManifest(
        records=records,
        metadata={
            "name": "mixed-training",
            "seed": rng_seed,
            "generator_version": GENERATOR_VERSION,
            "paste_fraction": paste_fraction,
            "shorter_side": shorter_side,
        },
    )
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def build_union_segmentation_set(
    inlier_manifest: DatasetManifest,
    background_manifest: DatasetManifest,
    class_count: int,
    out_dir: Path,
) -> tuple[DatasetManifest, int]:
    """Join both worlds under one ontology for the foreign-class baseline.

    Background images get a constant semantic label per texture family,
    appended after the street classes; returns the manifest and the union
    class count.
    """
    out_dir = Path(out_dir)
    (out_dir / "semantic").mkdir(parents=True, exist_ok=True)
    families = sorted({r.ext.get("family", "unknown") for r in background_manifest.records})
    family_class = {f: class_count + i for i, f in enumerate(families)}

    def rel_to_out(root: Path, rel: str) -> str:
        return os.path.relpath((Path(root) / rel).resolve(), out_dir.resolve())

    records = []
    for rec in inlier_manifest.records:
        image = rel_to_out(inlier_manifest.root, rec.image)
        semantic = rel_to_out(inlier_manifest.root, rec.semantic)
        records.append(ManifestRecord(rec.id, image, semantic, None, "id", dict(rec.ext)))
    for i, rec in enumerate(background_manifest.records):
        sample = background_manifest.load_sample(i)
        cls = family_class[rec.ext.get("family", "unknown")]
        sem = np.full(sample.image.shape[:2], cls, dtype=np.uint8)
        sem_rel = f"semantic/{i:06d}.png"
        save_mask(out_dir / sem_rel, sem)
        image = rel_to_out(background_manifest.root, rec.image)
        records.append(ManifestRecord(rec.id, image, sem_rel, None, "ood", {"family": rec.ext.get("family")}))

    union_classes = class_count + len(families)
    manifest = DatasetManifest(
        records=records,
        metadata={
            "name": "union-ontology",
            "seed": inlier_manifest.metadata.get("seed", 0),
            "generator_version": GENERATOR_VERSION,
            "union_classes": union_classes,
            "foreign_classes": sorted(family_class.values()),
        },
    )
    manifest.save(out_dir / "manifest.jsonl")
    return manifest, union_classes
