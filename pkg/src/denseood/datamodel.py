"""Core data types shared by every pipeline stage.

Images live in memory as float32 arrays in [0, 1] and on disk as 8-bit PNG.
Masks are single-channel uint8 PNGs; 255 is the IGNORE sentinel for both
semantic and inlier/outlier masks.  Dataset manifests are JSON Lines.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image as PilImage

IGNORE = 255
ID_LABEL = 0
OOD_LABEL = 1

ROLES = ("id", "ood", "mixed")

SCOREMAP_MAGIC = b"DOSM1"

GENERATOR_VERSION = "1"

MIN_IMAGE_SIDE = 32


class FormatError(ValueError):
    """Malformed on-disk artifact (bad magic, dims, payload length...)."""


class ConfigurationError(ValueError):
    """Invalid configuration value (non-finite stats, bad ranges...)."""


def round_half_up(x: float) -> int:
    """Rounding rule used wherever a scaled length must become an integer."""
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------------------
# validation helpers


def validate_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise ValueError(f"image sides must be >= {MIN_IMAGE_SIDE}, got {h}x{w}")
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return image.astype(np.float32, copy=False)


def validate_semantic(mask: np.ndarray, class_count: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.uint8)
    if mask.ndim != 2:
        raise ValueError(f"semantic mask must be 2-d, got {mask.shape}")
    bad = (mask != IGNORE) & (mask >= class_count)
    if bad.any():
        raise ValueError(f"semantic mask has ids >= {class_count}")
    return mask


def validate_ood(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.uint8)
    if mask.ndim != 2:
        raise ValueError(f"ood mask must be 2-d, got {mask.shape}")
    allowed = (mask == ID_LABEL) | (mask == OOD_LABEL) | (mask == IGNORE)
    if not allowed.all():
        raise ValueError("ood mask must contain only {0, 1, 255}")
    return mask


@dataclass
class Sample:
    """One image with optional semantic and inlier/outlier masks."""

    id: str
    image: np.ndarray
    semantic: Optional[np.ndarray] = None
    ood: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        h, w = self.image.shape[:2]
        for name in ("semantic", "ood"):
            mask = getattr(self, name)
            if mask is not None and mask.shape != (h, w):
                raise ValueError(
                    f"{name} mask shape {mask.shape} does not match image {h}x{w}"
                )

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


# ---------------------------------------------------------------------------
# image / mask I/O


def save_image(path: Path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float32)
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    PilImage.fromarray(data, mode="RGB").save(path, format="PNG")


def load_image(path: Path) -> np.ndarray:
    with PilImage.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return (data.astype(np.float32) / 255.0)


def save_mask(path: Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=np.uint8)
    PilImage.fromarray(mask, mode="L").save(path, format="PNG")


def load_mask(path: Path) -> np.ndarray:
    with PilImage.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8).copy()


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and standard deviation of the normalization dataset."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        for v in (*self.mean, *self.std):
            if not math.isfinite(v):
                raise ConfigurationError("normalization stats must be finite")
        if any(s <= 0 for s in self.std):
            raise ConfigurationError("normalization std must be > 0 per channel")

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @staticmethod
    def from_dict(d: dict) -> "NormStats":
        return NormStats(mean=tuple(d["mean"]), std=tuple(d["std"]))


def normalize(image: np.ndarray, stats: NormStats) -> np.ndarray:
    image = np.asarray(image)
    mean = np.asarray(stats.mean, dtype=image.dtype)
    std = np.asarray(stats.std, dtype=image.dtype)
    return (image - mean) / std


def denormalize(grid: np.ndarray, stats: NormStats) -> np.ndarray:
    grid = np.asarray(grid)
    mean = np.asarray(stats.mean, dtype=grid.dtype)
    std = np.asarray(stats.std, dtype=grid.dtype)
    return grid * std + mean


def compute_norm_stats(images: Iterator[np.ndarray]) -> NormStats:
    """Population per-channel mean/std over a stream of images."""
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    count = 0
    for image in images:
        image = np.asarray(image, dtype=np.float64)
        total += image.sum(axis=(0, 1))
        total_sq += np.square(image).sum(axis=(0, 1))
        count += image.shape[0] * image.shape[1]
    if count == 0:
        raise ConfigurationError("cannot compute stats over an empty dataset")
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 1e-8)
    return NormStats(mean=tuple(mean.tolist()), std=tuple(np.sqrt(var).tolist()))


# ---------------------------------------------------------------------------
# geometry


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a float image, channel by channel."""
    image = np.asarray(image, dtype=np.float32)
    out = np.empty((height, width, image.shape[2]), dtype=np.float32)
    for c in range(image.shape[2]):
        chan = PilImage.fromarray(image[:, :, c], mode="F")
        out[:, :, c] = np.asarray(
            chan.resize((width, height), PilImage.BILINEAR), dtype=np.float32
        )
    return np.clip(out, 0.0, 1.0)


def resize_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize; never invents values (sentinels survive)."""
    im = PilImage.fromarray(np.asarray(mask, dtype=np.uint8), mode="L")
    return np.asarray(im.resize((width, height), PilImage.NEAREST), dtype=np.uint8)


def resize(sample: Sample, shorter_side: int) -> Sample:
    """Scale so the shorter side hits `shorter_side`, aspect preserved.

    The scaled long side is rounded half-up so any two implementations of
    this rule agree on output dimensions.
    """
    if shorter_side < MIN_IMAGE_SIDE:
        raise ValueError(f"shorter_side must be >= {MIN_IMAGE_SIDE}")
    h, w = sample.image.shape[:2]
    if h <= w:
        nh = shorter_side
        nw = round_half_up(w * shorter_side / h)
    else:
        nw = shorter_side
        nh = round_half_up(h * shorter_side / w)
    if nh < 1 or nw < 1:
        raise ValueError("degenerate resize target")
    return Sample(
        id=sample.id,
        image=resize_image(sample.image, nh, nw),
        semantic=None if sample.semantic is None else resize_mask(sample.semantic, nh, nw),
        ood=None if sample.ood is None else resize_mask(sample.ood, nh, nw),
        meta=dict(sample.meta),
    )


def random_crop(sample: Sample, size: int, rng_seed: int) -> Sample:
    """Square crop at an offset drawn uniformly from the seeded generator."""
    h, w = sample.image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}; resize first")
    rng = np.random.default_rng(rng_seed)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    sl = (slice(top, top + size), slice(left, left + size))
    return Sample(
        id=sample.id,
        image=sample.image[sl].copy(),
        semantic=None if sample.semantic is None else sample.semantic[sl].copy(),
        ood=None if sample.ood is None else sample.ood[sl].copy(),
        meta=dict(sample.meta),
    )


# ---------------------------------------------------------------------------
# score maps


def write_scoremap(path: Path, scores: np.ndarray) -> None:
    scores = np.asarray(scores, dtype=np.float32)
    if scores.ndim != 2:
        raise ValueError(f"score map must be 2-d, got {scores.shape}")
    if not np.isfinite(scores).all():
        raise ValueError("score map contains non-finite values")
    h, w = scores.shape
    with open(path, "wb") as f:
        f.write(SCOREMAP_MAGIC + b"\n")
        f.write(f"{h} {w}\n".encode("ascii"))
        f.write(scores.astype("<f4").tobytes(order="C"))


def read_scoremap(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    magic_end = len(SCOREMAP_MAGIC) + 1
    if blob[:magic_end] != SCOREMAP_MAGIC + b"\n":
        raise FormatError(f"{path}: bad magic at offset 0")
    dims_end = blob.find(b"\n", magic_end)
    if dims_end < 0:
        raise FormatError(f"{path}: missing dims line at offset {magic_end}")
    try:
        h_s, w_s = blob[magic_end:dims_end].decode("ascii").split()
        h, w = int(h_s), int(w_s)
    except ValueError as e:
        raise FormatError(f"{path}: bad dims line at offset {magic_end}: {e}") from e
    if h < 1 or w < 1:
        raise FormatError(f"{path}: non-positive dims at offset {magic_end}")
    payload = blob[dims_end + 1 :]
    expected = h * w * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes at offset {dims_end + 1},"
            f" expected {expected} for {h}x{w}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).copy()


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image: str
    semantic: Optional[str]
    ood: Optional[str]
    role: str
    ext: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")

    def to_json(self) -> str:
        doc = {
            "id": self.id,
            "image": self.image,
            "semantic": self.semantic,
            "ood": self.ood,
            "role": self.role,
        }
        if self.ext:
            doc["ext"] = self.ext
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(line: str) -> "ManifestRecord":
        doc = json.loads(line)
        return ManifestRecord(
            id=doc["id"],
            image=doc["image"],
            semantic=doc.get("semantic"),
            ood=doc.get("ood"),
            role=doc["role"],
            ext=doc.get("ext", {}),
        )


@dataclass
class DatasetManifest:
    """Ordered sample records plus dataset-level metadata.

    Paths inside records resolve relative to the manifest file location
    (`root`, set on load and ignored for equality).
    """

    records: list[ManifestRecord]
    metadata: dict
    root: Optional[Path] = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    def serialize(self) -> str:
        lines = [json.dumps({"meta": self.metadata}, sort_keys=True, separators=(",", ":"))]
        lines.extend(r.to_json() for r in self.records)
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse(text: str, root: Optional[Path] = None) -> "DatasetManifest":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise FormatError("empty manifest")
        first = json.loads(lines[0])
        if set(first.keys()) == {"meta"}:
            metadata = first["meta"]
            record_lines = lines[1:]
        else:
            metadata = {}
            record_lines = lines
        records = [ManifestRecord.from_json(ln) for ln in record_lines]
        return DatasetManifest(records=records, metadata=metadata, root=root)

    def save(self, path: Path) -> None:
        path = Path(path)
        path.write_text(self.serialize(), encoding="utf-8")
        self.root = path.parent

    @staticmethod
    def load(path: Path) -> "DatasetManifest":
        path = Path(path)
        return DatasetManifest.parse(path.read_text(encoding="utf-8"), root=path.parent)

    def resolve(self, rel: str) -> Path:
        if self.root is None:
            raise ValueError("manifest has no root; load it from disk or set root")
        return self.root / rel

    def load_sample(self, index: int, class_count: Optional[int] = None) -> Sample:
        rec = self.records[index]
        image = load_image(self.resolve(rec.image))
        semantic = None
        if rec.semantic is not None:
            semantic = load_mask(self.resolve(rec.semantic))
            if class_count is not None:
                semantic = validate_semantic(semantic, class_count)
        ood = None
        if rec.ood is not None:
            ood = validate_ood(load_mask(self.resolve(rec.ood)))
            if rec.role == "id" and not rec.ext.get("control") and (ood != ID_LABEL).any():
                raise ValueError(f"record {rec.id}: role 'id' but ood mask not all-ID")
        sample = Sample(id=rec.id, image=image, semantic=semantic, ood=ood, meta=dict(rec.ext))
        # shape agreement is enforced by the Sample constructor
        return sample

    def iter_samples(self, class_count: Optional[int] = None) -> Iterator[Sample]:
        for i in range(len(self.records)):
            yield self.load_sample(i, class_count=class_count)


def derive_seed(*parts) -> int:
    """Stable seed derivation from a master seed and tags (strings or ints)."""
    ints = []
    for p in parts:
        if isinstance(p, str):
            ints.append(int.from_bytes(p.encode("utf-8").ljust(4, b"\0")[:8], "little"))
        else:
            ints.append(int(p) & 0xFFFFFFFFFFFFFFFF)
    ss = np.random.SeedSequence(ints)
    return int(ss.generate_state(1, dtype=np.uint64)[0])
