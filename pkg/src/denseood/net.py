"""Small fully-convolutional backbone with three heads.

The backbone is a plain conv-norm-activation pyramid (stage s halves the
resolution on entry, so stage 4's entry convolution doubles as the final
transition layer).  Heads:

* segmentation: upsampled deepest features concatenated with an earlier
  skip stage, pyramid-pooled context, then norm-relu-conv to class logits;
* confidence: a parallel pyramid-pooled branch whose output is blended with
  the *detached* segmentation logits through a norm-relu-conv + sigmoid, so
  no confidence gradient ever reaches parameters that only feed the
  segmentation logits;
* inlier/outlier: norm-relu-conv over the deepest features alone.

All heads emit maps at full input resolution (bilinear upsampling; inputs
whose sides are not multiples of the total stride are reflect-padded and the
outputs cropped back).  Checkpoints store a flat float32 parameter vector
with a JSON header and round-trip bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import FormatError, NormStats

HEAD_NAMES = ("segmentation", "confidence", "ood")

CHECKPOINT_MAGIC = b"DOCP1"


@dataclass(frozen=True)
class FcnConfig:
    stages: int = 4
    widths: tuple[int, ...] = (16, 32, 48, 64)
    skip_stage: int = 2
    pool_grids: tuple[int, ...] = (1, 2, 4)
    class_count: int = 8
    dropout: float = 0.0
    heads: tuple[str, ...] = ("segmentation", "confidence", "ood")

    def __post_init__(self):
        if len(self.widths) != self.stages:
            raise ValueError("widths must list one channel count per stage")
        if any(w <= 0 for w in self.widths):
            raise ValueError("stage widths must be positive")
        if not 1 <= self.skip_stage < self.stages:
            raise ValueError("skip_stage must be < stages")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        unknown = set(self.heads) - set(HEAD_NAMES)
        if unknown:
            raise ValueError(f"unknown heads {sorted(unknown)}")
        if "confidence" in self.heads and "segmentation" not in self.heads:
            raise ValueError("confidence head requires the segmentation head")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")

    @property
    def total_stride(self) -> int:
        return 2**self.stages

    def param_count(self) -> int:
        """Number of parameters a model built from this config carries."""
        model = TinyFcn(self)
        return sum(p.numel() for p in model.parameters())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(doc: dict) -> "FcnConfig":
        doc = dict(doc)
        for key in ("widths", "pool_grids", "heads"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return FcnConfig(**doc)


@dataclass(frozen=True)
class FreezePolicy:
    """Names of parameter groups that receive updates during training."""

    trainable: frozenset

    def __post_init__(self):
        if not self.trainable:
            raise ValueError("freeze policy must leave something trainable")

    @staticmethod
    def group_names(config: FcnConfig) -> tuple[str, ...]:
        groups = [f"stage{i + 1}" for i in range(config.stages)]
        if "segmentation" in config.heads:
            groups.append("seg_head")
        if "confidence" in config.heads:
            groups.append("conf_head")
        if "ood" in config.heads:
            groups.append("ood_head")
        return tuple(groups)

    @staticmethod
    def everything(config: FcnConfig) -> "FreezePolicy":
        return FreezePolicy(frozenset(FreezePolicy.group_names(config)))

    @staticmethod
    def ood_finetune(config: FcnConfig) -> "FreezePolicy":
        """Train only the last stage (whose entry conv is the transition)
        and the inlier/outlier head."""
        return FreezePolicy(frozenset({f"stage{config.stages}", "ood_head"}))


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class _Stage(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.down = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.norm1 = _gn(c_out)
        self.conv = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = _gn(c_out)

    def forward(self, x):
        x = F.relu(self.norm1(self.down(x)))
        return F.relu(self.norm2(self.conv(x)))


class _Pyramid(nn.Module):
    """Context pooling over fixed grids, concatenated back onto the input."""

    def __init__(self, c_in: int, grids: tuple[int, ...]):
        super().__init__()
        self.grids = grids
        branch = max(4, c_in // 4)
        self.branches = nn.ModuleList(nn.Conv2d(c_in, branch, 1) for _ in grids)
        self.out_channels = c_in + branch * len(grids)

    def forward(self, x):
        parts = [x]
        for g, conv in zip(self.grids, self.branches):
            pooled = F.adaptive_avg_pool2d(x, g)
            parts.append(F.interpolate(conv(pooled), size=x.shape[-2:], mode="bilinear", align_corners=False))
        return torch.cat(parts, dim=1)


class _NormReluConv(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.norm = _gn(c_in)
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)

    def forward(self, x):
        return self.conv(F.relu(self.norm(x)))


class _SegHead(nn.Module):
    def __init__(self, c_in: int, grids, class_count: int):
        super().__init__()
        self.pyramid = _Pyramid(c_in, grids)
        self.out = _NormReluConv(self.pyramid.out_channels, class_count)

    def forward(self, fused):
        return self.out(self.pyramid(fused))


class _ConfHead(nn.Module):
    def __init__(self, c_in: int, grids, class_count: int):
        super().__init__()
        self.pyramid = _Pyramid(c_in, grids)
        branch = max(8, c_in // 4)
        self.pre = _NormReluConv(self.pyramid.out_channels, branch)
        self.blend = _NormReluConv(branch + class_count, 1)

    def forward(self, fused, seg_logits):
        conf_feats = self.pre(self.pyramid(fused))
        blended = self.blend(torch.cat([seg_logits.detach(), conf_feats], dim=1))
        return torch.sigmoid(blended)


class TinyFcn(nn.Module):
    def __init__(self, config: FcnConfig):
        super().__init__()
        self.config = config
        widths = config.widths
        stages = []
        c_prev = 3
        for c in widths:
            stages.append(_Stage(c_prev, c))
            c_prev = c
        for i, st in enumerate(stages):
            self.add_module(f"stage{i + 1}", st)
        self._stage_names = [f"stage{i + 1}" for i in range(config.stages)]

        fused_c = widths[config.skip_stage - 1] + widths[-1]
        if "segmentation" in config.heads:
            self.seg_head = _SegHead(fused_c, config.pool_grids, config.class_count)
        if "confidence" in config.heads:
            self.conf_head = _ConfHead(fused_c, config.pool_grids, config.class_count)
        if "ood" in config.heads:
            self.ood_head = _NormReluConv(widths[-1], 2)

    def backbone_features(self, x, sample_dropout: bool = False):
        feats = []
        for i, name in enumerate(self._stage_names):
            x = getattr(self, name)(x)
            p = self.config.dropout
            if p > 0 and i >= self.config.stages - 2 and (self.training or sample_dropout):
                x = F.dropout2d(x, p, training=True)
            feats.append(x)
        return feats

    def forward(self, x, heads: Optional[tuple[str, ...]] = None, sample_dropout: bool = False):
        """Returns a dict of full-resolution head outputs for `x` (N,3,H,W)."""
        heads = tuple(heads) if heads is not None else self.config.heads
        missing = set(heads) - set(self.config.heads)
        if missing:
            raise ValueError(f"heads {sorted(missing)} not enabled in this model")
        n, _, h, w = x.shape
        stride = self.config.total_stride
        pad_h = (-h) % stride
        pad_w = (-w) % stride
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")

        feats = self.backbone_features(x, sample_dropout=sample_dropout)
        deep = feats[-1]
        out: dict[str, torch.Tensor] = {}
        size = x.shape[-2:]

        def up(t):
            t = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
            return t[:, :, :h, :w]

        if "segmentation" in heads or "confidence" in heads:
            skip = feats[self.config.skip_stage - 1]
            deep_up = F.interpolate(deep, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            fused = torch.cat([skip, deep_up], dim=1)
            seg_logits = self.seg_head(fused)
            if "segmentation" in heads:
                out["segmentation"] = up(seg_logits)
            if "confidence" in heads:
                conf = self.conf_head(fused, seg_logits)
                out["confidence"] = up(conf).clamp(1e-6, 1 - 1e-6).squeeze(1)
        if "ood" in heads:
            out["ood"] = up(self.ood_head(deep))
        return out

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups: dict[str, list[nn.Parameter]] = {}
        for name in self._stage_names:
            groups[name] = list(getattr(self, name).parameters())
        if hasattr(self, "seg_head"):
            groups["seg_head"] = list(self.seg_head.parameters())
        if hasattr(self, "conf_head"):
            groups["conf_head"] = list(self.conf_head.parameters())
        if hasattr(self, "ood_head"):
            groups["ood_head"] = list(self.ood_head.parameters())
        return groups


def init_model(config: FcnConfig, seed: int) -> TinyFcn:
    """Seeded He-style fan-in initialization; biases and norm offsets zero."""
    model = TinyFcn(config)
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() >= 2:  # conv weights
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen) * math.sqrt(2.0 / fan_in))
            elif name.endswith("weight"):  # norm scales
                p.fill_(1.0)
            else:
                p.zero_()
    return model


# ---------------------------------------------------------------------------
# checkpoints


def flatten_params(model: nn.Module) -> np.ndarray:
    chunks = [p.detach().cpu().numpy().astype(np.float32, copy=False).ravel() for p in model.parameters()]
    return np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float32)


def load_flat_params(model: nn.Module, flat: np.ndarray) -> None:
    flat = np.asarray(flat, dtype=np.float32)
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            chunk = flat[offset : offset + n].reshape(tuple(p.shape))
            p.copy_(torch.from_numpy(chunk.copy()).to(p.dtype))
            offset += n
    if offset != flat.size:
        raise ValueError(f"parameter vector has {flat.size} values, model wants {offset}")


@dataclass
class ModelCheckpoint:
    config: FcnConfig
    params: np.ndarray
    norm_stats: NormStats
    metadata: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float32)
        expected = self.config.param_count()
        if self.params.size != expected:
            raise ValueError(
                f"checkpoint holds {self.params.size} parameters,"
                f" config implies {expected}"
            )

    def save(self, path: Path) -> None:
        header = {
            "config": self.config.to_dict(),
            "norm_stats": self.norm_stats.to_dict(),
            "metadata": self.metadata,
            "param_count": int(self.params.size),
        }
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC + b"\n")
            f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            f.write(self.params.astype("<f4").tobytes())

    @staticmethod
    def load(path: Path) -> "ModelCheckpoint":
        with open(path, "rb") as f:
            blob = f.read()
        magic_end = len(CHECKPOINT_MAGIC) + 1
        if blob[:magic_end] != CHECKPOINT_MAGIC + b"\n":
            raise FormatError(f"{path}: bad checkpoint magic")
        header_end = blob.find(b"\n", magic_end)
        if header_end < 0:
            raise FormatError(f"{path}: missing header line")
        header = json.loads(blob[magic_end:header_end].decode("utf-8"))
        payload = blob[header_end + 1 :]
        count = header["param_count"]
        if len(payload) != count * 4:
            raise FormatError(
                f"{path}: payload {len(payload)} bytes, expected {count * 4}"
            )
        params = np.frombuffer(payload, dtype="<f4").copy()
        return ModelCheckpoint(
            config=FcnConfig.from_dict(header["config"]),
            params=params,
            norm_stats=NormStats.from_dict(header["norm_stats"]),
            metadata=header["metadata"],
        )


def build_model(ckpt: ModelCheckpoint, dtype: torch.dtype = torch.float32) -> TinyFcn:
    """Materialize the checkpoint; float32 instances are cached per ckpt."""
    key = str(dtype)
    if key in ckpt._cache:
        return ckpt._cache[key]
    model = TinyFcn(ckpt.config)
    load_flat_params(model, ckpt.params)
    model = model.to(dtype)
    model.eval()
    if dtype == torch.float32:
        ckpt._cache[key] = model
    return model


def make_checkpoint(model: TinyFcn, norm_stats: NormStats, metadata: Optional[dict] = None) -> ModelCheckpoint:
    return ModelCheckpoint(
        config=model.config,
        params=flatten_params(model),
        norm_stats=norm_stats,
        metadata=metadata or {},
    )


def init_checkpoint(config: FcnConfig, seed: int, norm_stats: NormStats) -> ModelCheckpoint:
    model = init_model(config, seed)
    return make_checkpoint(model, norm_stats, {"seed": seed, "epochs_run": 0})


def transfer_backbone(source: ModelCheckpoint, config: FcnConfig, seed: int) -> ModelCheckpoint:
    """Fresh checkpoint for `config` with backbone stages copied from
    `source` (heads initialized from the seed).  Normalization statistics
    follow the source: its features expect that input distribution."""
    if source.config.stages != config.stages or source.config.widths != config.widths:
        raise ValueError("backbone transfer needs matching stage widths")
    src = build_model(source)
    dst = init_model(config, seed)
    with torch.no_grad():
        for name in [f"stage{i + 1}" for i in range(config.stages)]:
            for ps, pd in zip(getattr(src, name).parameters(), getattr(dst, name).parameters()):
                pd.copy_(ps)
    meta = {"seed": seed, "epochs_run": 0, "transferred_from": source.metadata.get("mode", "?")}
    return make_checkpoint(dst, source.norm_stats, meta)


# ---------------------------------------------------------------------------
# inference entry points (numpy in, numpy out)


def _to_input(ckpt: ModelCheckpoint, image: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {image.shape}")
    x = torch.from_numpy(np.ascontiguousarray(image)).to(dtype)
    mean = torch.tensor(ckpt.norm_stats.mean, dtype=dtype)
    std = torch.tensor(ckpt.norm_stats.std, dtype=dtype)
    x = (x - mean) / std
    return x.permute(2, 0, 1).unsqueeze(0)


def forward_heads(
    ckpt: ModelCheckpoint,
    image: np.ndarray,
    heads: tuple[str, ...],
    sample_dropout: bool = False,
    dtype: torch.dtype = torch.float32,
) -> dict[str, np.ndarray]:
    model = build_model(ckpt, dtype)
    with torch.no_grad():
        out = model(_to_input(ckpt, image, dtype), heads=heads, sample_dropout=sample_dropout)
    result = {}
    for name, t in out.items():
        t = t.squeeze(0)
        if t.dim() == 3:  # (C,H,W) -> (H,W,C)
            t = t.permute(1, 2, 0)
        result[name] = t.cpu().numpy()
    return result


def forward_segmentation(ckpt: ModelCheckpoint, image: np.ndarray) -> np.ndarray:
    """Class logits at full input resolution, shape (H, W, C)."""
    return forward_heads(ckpt, image, ("segmentation",))["segmentation"]


def forward_ood(ckpt: ModelCheckpoint, image: np.ndarray) -> np.ndarray:
    """Inlier/outlier logits from the deepest stage only, shape (H, W, 2)."""
    return forward_heads(ckpt, image, ("ood",))["ood"]


def forward_confidence(ckpt: ModelCheckpoint, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(class logits (H, W, C), confidence map (H, W) in (0, 1))."""
    if "confidence" not in ckpt.config.heads:
        raise ValueError("checkpoint has no confidence head")
    out = forward_heads(ckpt, image, ("segmentation", "confidence"))
    return out["segmentation"], out["confidence"]


def backbone_activations(ckpt: ModelCheckpoint, image: np.ndarray) -> list[np.ndarray]:
    """Per-stage feature maps (for shared-computation checks)."""
    model = build_model(ckpt, torch.float32)
    x = _to_input(ckpt, image, torch.float32)
    stride = ckpt.config.total_stride
    pad_h = (-x.shape[-2]) % stride
    pad_w = (-x.shape[-1]) % stride
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
    with torch.no_grad():
        feats = model.backbone_features(x)
    return [f.squeeze(0).cpu().numpy() for f in feats]


def input_gradient(
    ckpt: ModelCheckpoint,
    image: np.ndarray,
    temperature: float,
    dtype: torch.dtype = torch.float32,
) -> np.ndarray:
    """Exact gradient, w.r.t. input pixels, of the summed log tempered-softmax
    probability of each pixel's winning class (winners fixed at temperature 1).
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    model = build_model(ckpt, dtype)
    x = torch.from_numpy(np.ascontiguousarray(image)).to(dtype).requires_grad_(True)
    mean = torch.tensor(ckpt.norm_stats.mean, dtype=dtype)
    std = torch.tensor(ckpt.norm_stats.std, dtype=dtype)
    inp = ((x - mean) / std).permute(2, 0, 1).unsqueeze(0)
    logits = model(inp, heads=("segmentation",))["segmentation"]
    winners = logits.argmax(dim=1, keepdim=True).detach()
    logp = F.log_softmax(logits / temperature, dim=1)
    objective = logp.gather(1, winners).sum()
    (grad,) = torch.autograd.grad(objective, x)
    return grad.detach().cpu().numpy()
