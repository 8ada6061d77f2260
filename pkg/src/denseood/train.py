"""Losses, epoch planning and training loops.

Three trainable objectives: plain segmentation, confidence-modulated
segmentation, and the binary inlier/outlier discriminator fed with mixed
half-and-half batches where the smaller dataset is cycled (with per-cycle
reshuffles) until both sides contribute the same number of crops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import (
    DatasetManifest,
    IGNORE,
    NormStats,
    Sample,
    compute_norm_stats,
    derive_seed,
    normalize,
    random_crop,
    resize,
    round_half_up,
)
from .net import (
    FcnConfig,
    FreezePolicy,
    ModelCheckpoint,
    TinyFcn,
    flatten_params,
    forward_heads,
    init_model,
    load_flat_params,
    make_checkpoint,
)


@dataclass(frozen=True)
class TrainConfig:
    model: FcnConfig = field(default_factory=FcnConfig)
    epochs: int = 10
    batch_size: int = 8
    lr: float = 4e-4
    lr_decay: float = 0.95
    head_lr_ratio: float = 4.0  # backbone learning rate = lr / ratio
    crop: int = 64
    seed: int = 0
    freeze: Optional[FreezePolicy] = None  # None: train everything
    confidence_penalty: float = 0.1
    val_target: float = 0.99
    val_limit: int = 16
    keep_best: bool = True  # keep the best-validation epoch's parameters
    resize_shorter: Optional[int] = None
    scale: float = 1.0
    norm_sample_limit: int = 128

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.confidence_penalty < 0:
            raise ValueError("confidence penalty must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")


# ---------------------------------------------------------------------------
# losses


def _as_nchw(logits: torch.Tensor, target: torch.Tensor):
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
    if target.dim() == 2:
        target = target.unsqueeze(0)
    if logits.shape[0] != target.shape[0] or logits.shape[-2:] != target.shape[-2:]:
        raise ValueError(f"logits {tuple(logits.shape)} / target {tuple(target.shape)} mismatch")
    return logits, target.long()


def ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean negative log-softmax over non-ignored pixels (0 if none)."""
    logits, target = _as_nchw(logits, target)
    valid = target != IGNORE
    if not bool(valid.any()):
        return logits.sum() * 0.0
    logp = F.log_softmax(logits, dim=1)
    gathered = logp.gather(1, target.clamp(max=logits.shape[1] - 1).unsqueeze(1)).squeeze(1)
    return -gathered[valid].mean()


def ood_loss(ood_logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Two-class cross-entropy over non-ignored pixels of an outlier mask."""
    if ood_logits.shape[-3 if ood_logits.dim() == 4 else 0] != 2:
        raise ValueError("ood logits must have 2 channels")
    return ce_loss(ood_logits, target)


def confidence_loss(
    logits: torch.Tensor,
    confidence: torch.Tensor,
    target: torch.Tensor,
    penalty: float,
) -> torch.Tensor:
    """Cross-entropy on predictions interpolated toward the ground truth.

    Per pixel: p' = c * softmax(logits) + (1 - c) * onehot(target); the data
    term is -log p'_target and low confidence pays penalty * -log c.
    """
    logits, target = _as_nchw(logits, target)
    if confidence.dim() == 2:
        confidence = confidence.unsqueeze(0)
    cmin = float(confidence.min())
    cmax = float(confidence.max())
    # exactly 1 is tolerated (the penalty term is -log 1 = 0); 0 is not
    if not (0.0 < cmin and cmax <= 1.0):
        raise ValueError(f"confidence must lie in (0, 1]; got [{cmin}, {cmax}]")
    valid = target != IGNORE
    if not bool(valid.any()):
        return logits.sum() * 0.0 + confidence.sum() * 0.0
    probs = F.softmax(logits, dim=1)
    p_target = probs.gather(1, target.clamp(max=logits.shape[1] - 1).unsqueeze(1)).squeeze(1)
    p_mixed = confidence * p_target + (1.0 - confidence)
    data_term = -(torch.log(p_mixed)[valid]).mean()
    conf_term = -(torch.log(confidence)[valid]).mean()
    return data_term + penalty * conf_term


# ---------------------------------------------------------------------------
# epoch planning


@dataclass(frozen=True)
class PlanEntry:
    stream: str  # "train" | "inlier" | "background"
    index: int
    crop_seed: int


@dataclass
class BatchPlan:
    batches: list[list[PlanEntry]]

    def __iter__(self):
        return iter(self.batches)

    def __len__(self):
        return len(self.batches)


def _cycled_order(n: int, length: int, rng: np.random.Generator) -> list[int]:
    order: list[int] = []
    while len(order) < length:
        order.extend(rng.permutation(n).tolist())
    return order[:length]


def plan_epoch(n: int, seed: int, batch_size: int, stream: str = "train") -> BatchPlan:
    rng = np.random.default_rng(seed)
    order = rng.permutation(n).tolist()
    entries = [
        PlanEntry(stream, idx, derive_seed(seed, "crop", k)) for k, idx in enumerate(order)
    ]
    batches = [entries[i : i + batch_size] for i in range(0, len(entries), batch_size)]
    return BatchPlan(batches)


def plan_oversampled_epoch(
    inlier_manifest: DatasetManifest,
    background_manifest: DatasetManifest,
    seed: int,
    batch_size: int = 8,
) -> BatchPlan:
    """Mixed half-and-half batches; the smaller dataset cycles to the larger
    one's length so both label kinds get equal pixel exposure per epoch."""
    if len(inlier_manifest) == 0 or len(background_manifest) == 0:
        raise ValueError("both manifests must be non-empty")
    if batch_size % 2 != 0:
        raise ValueError("mixed batches need an even batch size")
    n_i, n_b = len(inlier_manifest), len(background_manifest)
    length = max(n_i, n_b)
    rng = np.random.default_rng(seed)
    inl = _cycled_order(n_i, length, rng)
    bg = _cycled_order(n_b, length, rng)
    entries: list[PlanEntry] = []
    for k in range(length):
        entries.append(PlanEntry("inlier", inl[k], derive_seed(seed, "crop-i", k)))
        entries.append(PlanEntry("background", bg[k], derive_seed(seed, "crop-b", k)))
    batches = [entries[i : i + batch_size] for i in range(0, len(entries), batch_size)]
    return BatchPlan(batches)


def plan_label_exposure(plan: BatchPlan, crop: int) -> tuple[int, int]:
    """(inlier-labeled, outlier-labeled) pixel counts for a whole-image plan."""
    px = crop * crop
    n_id = sum(1 for b in plan for e in b if e.stream in ("train", "inlier")) * px
    n_ood = sum(1 for b in plan for e in b if e.stream == "background") * px
    return n_id, n_ood


# ---------------------------------------------------------------------------
# sample preparation


class _Loader:
    """Loads, rescales and caches decoded samples from one manifest."""

    def __init__(self, manifest: DatasetManifest, config: TrainConfig):
        self.manifest = manifest
        self.config = config
        self._cache: dict[int, Sample] = {}

    def __len__(self):
        return len(self.manifest)

    def get(self, index: int) -> Sample:
        if index not in self._cache:
            s = self.manifest.load_sample(index)
            if self.config.resize_shorter is not None:
                s = resize(s, self.config.resize_shorter)
            if self.config.scale != 1.0:
                target = max(32, round_half_up(min(s.height, s.width) * self.config.scale))
                s = resize(s, target)
            self._cache[index] = s
        return self._cache[index]

    def role(self, index: int) -> str:
        return self.manifest.records[index].role


def _whole_image_target(sample: Sample, stream: str) -> np.ndarray:
    """Outlier-mask target: stored mask if any (mixed training sets), else
    every inlier-stream pixel is inlier and every background pixel outlier."""
    if stream == "background" and sample.ood is not None:
        return sample.ood
    value = 0 if stream in ("train", "inlier") else 1
    return np.full(sample.image.shape[:2], value, dtype=np.uint8)


def _batch_tensors(
    entries: list[PlanEntry],
    loaders: dict[str, _Loader],
    stats: NormStats,
    crop: int,
    task: str,
) -> tuple[torch.Tensor, torch.Tensor]:
    images, targets = [], []
    for e in entries:
        sample = loaders[e.stream].get(e.index)
        if task == "ood":
            sample = Sample(
                id=sample.id,
                image=sample.image,
                ood=_whole_image_target(sample, e.stream),
            )
        cropped = random_crop(sample, crop, e.crop_seed)
        images.append(normalize(cropped.image, stats))
        if task == "semantic":
            if cropped.semantic is None:
                raise ValueError(f"sample {sample.id} has no semantic mask")
            targets.append(cropped.semantic)
        else:
            targets.append(cropped.ood)
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()
    t = torch.from_numpy(np.stack(targets).astype(np.int64))
    return x, t


# ---------------------------------------------------------------------------
# validation metrics


def semantic_accuracy(ckpt: ModelCheckpoint, manifest: DatasetManifest, limit: int = 16) -> float:
    correct = 0
    total = 0
    for i in range(min(limit, len(manifest))):
        s = manifest.load_sample(i)
        if s.semantic is None:
            continue
        logits = forward_heads(ckpt, s.image, ("segmentation",))["segmentation"]
        pred = logits.argmax(axis=2)
        valid = s.semantic != IGNORE
        correct += int((pred[valid] == s.semantic[valid]).sum())
        total += int(valid.sum())
    return correct / total if total else float("nan")


def discriminative_accuracy(
    ckpt: ModelCheckpoint,
    inlier_manifest: DatasetManifest,
    background_manifest: DatasetManifest,
    limit: int = 16,
    threshold: float = 0.5,
) -> float:
    correct = 0
    total = 0
    for manifest, positive in ((inlier_manifest, False), (background_manifest, True)):
        for i in range(min(limit, len(manifest))):
            s = manifest.load_sample(i)
            logits = forward_heads(ckpt, s.image, ("ood",))["ood"]
            shifted = logits - logits.max(axis=2, keepdims=True)
            e = np.exp(shifted)
            p_out = e[:, :, 1] / e.sum(axis=2)
            pred = p_out > threshold
            correct += int(pred.sum() if positive else (~pred).sum())
            total += pred.size
    return correct / total if total else float("nan")


# ---------------------------------------------------------------------------
# the loop


def _apply_freeze(model: TinyFcn, policy: FreezePolicy) -> None:
    groups = model.parameter_groups()
    unknown = policy.trainable - set(groups)
    if unknown:
        raise ValueError(f"freeze policy names unknown groups {sorted(unknown)}")
    for name, params in groups.items():
        flag = name in policy.trainable
        for p in params:
            p.requires_grad_(flag)


def _optimizer(model: TinyFcn, config: TrainConfig) -> torch.optim.Adam:
    groups = model.parameter_groups()
    param_groups = []
    for name, params in groups.items():
        trainable = [p for p in params if p.requires_grad]
        if not trainable:
            continue
        lr = config.lr if name.endswith("_head") else config.lr / config.head_lr_ratio
        param_groups.append({"params": trainable, "lr": lr, "initial_lr": lr})
    return torch.optim.Adam(param_groups)


def _train(
    config: TrainConfig,
    model: TinyFcn,
    norm_stats: NormStats,
    plan_fn: Callable[[int], BatchPlan],
    loaders: dict[str, _Loader],
    loss_fn: Callable[[TinyFcn, torch.Tensor, torch.Tensor], torch.Tensor],
    task: str,
    mode: str,
    val_fn: Optional[Callable[[ModelCheckpoint], float]] = None,
    early_stop: bool = False,
) -> ModelCheckpoint:
    torch.manual_seed(config.seed & 0x7FFFFFFFFFFFFFFF)
    policy = config.freeze or FreezePolicy.everything(model.config)
    _apply_freeze(model, policy)
    opt = _optimizer(model, config)

    history: dict[str, list] = {"train_loss": [], "val_metric": [], "lr": []}
    epochs_run = 0
    best: Optional[tuple[float, int, np.ndarray]] = None
    for epoch in range(config.epochs):
        factor = config.lr_decay**epoch
        for g in opt.param_groups:
            g["lr"] = g["initial_lr"] * factor
        plan = plan_fn(derive_seed(config.seed, "epoch", epoch))
        model.train()
        losses = []
        for b, entries in enumerate(plan):
            x, t = _batch_tensors(entries, loaders, norm_stats, config.crop, task)
            opt.zero_grad(set_to_none=True)
            loss = loss_fn(model, x, t)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"{mode}: non-finite loss at epoch {epoch} batch {b}"
                    f" (samples {[e.index for e in entries]})"
                )
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        model.eval()
        epochs_run = epoch + 1
        history["train_loss"].append(float(np.mean(losses)))
        history["lr"].append(config.lr * factor)
        if val_fn is not None:
            ckpt = make_checkpoint(model, norm_stats)
            metric = val_fn(ckpt)
            history["val_metric"].append(metric)
            if config.keep_best and (best is None or metric > best[0]):
                best = (metric, epoch, flatten_params(model))
            if early_stop and metric >= config.val_target:
                break
        else:
            history["val_metric"].append(None)

    metadata = {
        "mode": mode,
        "seed": config.seed,
        "epochs_run": epochs_run,
        **history,
    }
    if best is not None:
        load_flat_params(model, best[2])
        metadata["best_epoch"] = best[1]
    return make_checkpoint(model, norm_stats, metadata)


def _init_model_for(config: TrainConfig, init: Optional[ModelCheckpoint]) -> tuple[TinyFcn, Optional[NormStats]]:
    if init is not None:
        model = TinyFcn(init.config)
        load_flat_params(model, init.params)
        return model, init.norm_stats
    return init_model(config.model, config.seed), None


def _stats_for(config: TrainConfig, manifest: DatasetManifest, preset: Optional[NormStats]) -> NormStats:
    if preset is not None:
        return preset
    limit = min(config.norm_sample_limit, len(manifest))
    return compute_norm_stats(manifest.load_sample(i).image for i in range(limit))


def train_primary(
    config: TrainConfig,
    train_manifest: DatasetManifest,
    val_manifest: Optional[DatasetManifest] = None,
    init: Optional[ModelCheckpoint] = None,
    class_count: Optional[int] = None,
) -> ModelCheckpoint:
    """Segmentation training with plain cross-entropy."""
    if class_count is not None and init is None:
        config = replace(config, model=replace(config.model, class_count=class_count))
    model, preset = _init_model_for(config, init)
    stats = _stats_for(config, train_manifest, preset)
    loaders = {"train": _Loader(train_manifest, config)}

    def loss_fn(m, x, t):
        out = m(x, heads=("segmentation",))
        return ce_loss(out["segmentation"], t)

    val_fn = None
    if val_manifest is not None:
        val_fn = lambda ckpt: semantic_accuracy(ckpt, val_manifest, config.val_limit)
    return _train(
        config, model, stats,
        plan_fn=lambda s: plan_epoch(len(train_manifest), s, config.batch_size),
        loaders=loaders, loss_fn=loss_fn, task="semantic", mode="primary", val_fn=val_fn,
    )


def train_confidence(
    config: TrainConfig,
    train_manifest: DatasetManifest,
    val_manifest: Optional[DatasetManifest] = None,
    init: Optional[ModelCheckpoint] = None,
) -> ModelCheckpoint:
    """Segmentation with a trained per-pixel confidence head."""
    model, preset = _init_model_for(config, init)
    if "confidence" not in model.config.heads:
        raise ValueError("model config lacks the confidence head")
    stats = _stats_for(config, train_manifest, preset)
    loaders = {"train": _Loader(train_manifest, config)}

    def loss_fn(m, x, t):
        out = m(x, heads=("segmentation", "confidence"))
        return confidence_loss(out["segmentation"], out["confidence"], t, config.confidence_penalty)

    val_fn = None
    if val_manifest is not None:
        val_fn = lambda ckpt: semantic_accuracy(ckpt, val_manifest, config.val_limit)
    return _train(
        config, model, stats,
        plan_fn=lambda s: plan_epoch(len(train_manifest), s, config.batch_size),
        loaders=loaders, loss_fn=loss_fn, task="semantic", mode="confidence", val_fn=val_fn,
    )


def train_discriminative(
    config: TrainConfig,
    inlier_manifest: DatasetManifest,
    background_manifest: DatasetManifest,
    val_inlier: Optional[DatasetManifest] = None,
    val_background: Optional[DatasetManifest] = None,
    init: Optional[ModelCheckpoint] = None,
) -> ModelCheckpoint:
    """Binary inlier/outlier training on mixed oversampled batches.

    Stops early once validation pixel accuracy reaches the configured
    target (pixels from the background stream count as outliers unless the
    record carries its own outlier mask, e.g. mixed training sets)."""
    model, preset = _init_model_for(config, init)
    if "ood" not in model.config.heads:
        raise ValueError("model config lacks the inlier/outlier head")
    stats = _stats_for(config, background_manifest, preset)
    loaders = {
        "inlier": _Loader(inlier_manifest, config),
        "background": _Loader(background_manifest, config),
    }

    def loss_fn(m, x, t):
        out = m(x, heads=("ood",))
        return ood_loss(out["ood"], t)

    val_fn = None
    if val_inlier is not None and val_background is not None:
        val_fn = lambda ckpt: discriminative_accuracy(
            ckpt, val_inlier, val_background, config.val_limit
        )
    return _train(
        config, model, stats,
        plan_fn=lambda s: plan_oversampled_epoch(
            inlier_manifest, background_manifest, s, config.batch_size
        ),
        loaders=loaders, loss_fn=loss_fn, task="ood", mode="discriminative",
        val_fn=val_fn, early_stop=val_fn is not None,
    )
