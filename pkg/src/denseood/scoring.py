"""Per-pixel outlier scorers.

Every scorer returns an (H, W) float32 map where larger means more likely
out-of-distribution, so downstream thresholds and curves compare uniformly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from .datamodel import DatasetManifest, derive_seed, write_scoremap
from .net import ModelCheckpoint, forward_heads, forward_segmentation, input_gradient

METHODS = ("max_softmax", "odin", "confidence", "discrim", "foreign", "mc_mi")


@dataclass(frozen=True)
class OdinConfig:
    epsilon: float = 0.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _one_minus_max_softmax(logits: np.ndarray) -> np.ndarray:
    return (1.0 - softmax(logits).max(axis=-1)).astype(np.float32)


def score_max_softmax(logits: np.ndarray) -> np.ndarray:
    """1 - winning softmax probability per pixel."""
    if logits.ndim != 3 or logits.shape[2] < 2:
        raise ValueError("expected (H, W, C>=2) logits")
    return _one_minus_max_softmax(logits)


def score_odin(ckpt: ModelCheckpoint, image: np.ndarray, cfg: OdinConfig) -> np.ndarray:
    """Max-softmax after nudging the input toward each pixel's winning class
    and tempering the softmax.  (0, 1) reduces exactly to plain max-softmax."""
    if cfg.epsilon > 0:
        grad = input_gradient(ckpt, image, cfg.temperature)
        perturbed = np.clip(image + cfg.epsilon * np.sign(grad), 0.0, 1.0).astype(np.float32)
    else:
        perturbed = np.clip(image, 0.0, 1.0).astype(np.float32)
    logits = forward_segmentation(ckpt, perturbed)
    return _one_minus_max_softmax(logits / cfg.temperature)


def score_confidence(confidence: np.ndarray) -> np.ndarray:
    """1 - trained confidence."""
    if confidence.min() <= 0.0 or confidence.max() >= 1.0:
        raise ValueError("confidence values must lie strictly inside (0, 1)")
    return (1.0 - confidence).astype(np.float32)


def score_discriminative(ood_logits: np.ndarray) -> np.ndarray:
    """Softmax probability of the outlier channel."""
    if ood_logits.ndim != 3 or ood_logits.shape[2] != 2:
        raise ValueError("expected (H, W, 2) inlier/outlier logits")
    return softmax(ood_logits)[:, :, 1].astype(np.float32)


def score_foreign_class(
    logits: np.ndarray,
    foreign_set: Iterable[int],
    winner: bool = False,
) -> np.ndarray:
    """Probability mass on classes outside the evaluation ontology.

    With `winner`, a hard 0/1 map flags pixels whose argmax is foreign.
    """
    foreign = sorted(set(int(c) for c in foreign_set))
    c = logits.shape[2]
    if not foreign:
        raise ValueError("foreign_set must be non-empty")
    if any(f < 0 or f >= c for f in foreign):
        raise ValueError(f"foreign ids must be in [0, {c})")
    if len(foreign) >= c:
        raise ValueError("foreign_set must be a proper subset of the classes")
    if winner:
        return np.isin(logits.argmax(axis=2), foreign).astype(np.float32)
    return softmax(logits)[:, :, foreign].sum(axis=2).astype(np.float32)


def _entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    q = np.clip(p, 1e-12, 1.0)
    return -(q * np.log(q)).sum(axis=axis)


def mutual_information(prob_samples: np.ndarray) -> np.ndarray:
    """Entropy of the mean prediction minus mean per-sample entropy.

    `prob_samples` is (K, ..., C); the result is clipped at zero to absorb
    float noise since the difference is non-negative in exact arithmetic.
    """
    p = np.asarray(prob_samples, dtype=np.float64)
    if p.ndim < 2 or p.shape[0] < 2:
        raise ValueError("need at least 2 probability samples")
    mi = _entropy(p.mean(axis=0)) - _entropy(p).mean(axis=0)
    return np.maximum(mi, 0.0)


def score_mc_mutual_info(
    ckpt: ModelCheckpoint,
    image: np.ndarray,
    n_samples: int,
    seed: int,
) -> np.ndarray:
    """Epistemic score from dropout-sampled predictions."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if ckpt.config.dropout <= 0:
        raise ValueError("mutual-information scoring needs dropout enabled")
    torch.manual_seed(derive_seed(seed, "mc") & 0x7FFFFFFFFFFFFFFF)
    probs = []
    for _ in range(n_samples):
        logits = forward_heads(ckpt, image, ("segmentation",), sample_dropout=True)["segmentation"]
        probs.append(softmax(logits).astype(np.float64))
    return mutual_information(np.stack(probs)).astype(np.float32)


# ---------------------------------------------------------------------------
# scoring whole manifests to disk


def score_sample(
    method: str,
    ckpt: Optional[ModelCheckpoint],
    image: np.ndarray,
    odin: Optional[OdinConfig] = None,
    foreign_set: Optional[Iterable[int]] = None,
    winner: bool = False,
    mc_samples: int = 8,
    seed: int = 0,
) -> np.ndarray:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; known: {METHODS}")
    if method == "max_softmax":
        return score_max_softmax(forward_segmentation(ckpt, image))
    if method == "odin":
        return score_odin(ckpt, image, odin or OdinConfig())
    if method == "confidence":
        out = forward_heads(ckpt, image, ("segmentation", "confidence"))
        return score_confidence(out["confidence"])
    if method == "discrim":
        return score_discriminative(forward_heads(ckpt, image, ("ood",))["ood"])
    if method == "foreign":
        if foreign_set is None:
            raise ValueError("foreign scoring needs foreign_set")
        return score_foreign_class(forward_segmentation(ckpt, image), foreign_set, winner=winner)
    return score_mc_mutual_info(ckpt, image, mc_samples, seed)


def score_manifest(
    method: str,
    ckpt: Optional[ModelCheckpoint],
    manifest: DatasetManifest,
    out_dir: Path,
    **kwargs,
) -> Path:
    """Score every record, write score-map files plus a scores manifest."""
    out_dir = Path(out_dir)
    (out_dir / "scores").mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"meta": {"method": method, "name": manifest.metadata.get("name", "")}},
                        sort_keys=True, separators=(",", ":"))]
    for i, rec in enumerate(manifest.records):
        sample = manifest.load_sample(i)
        scores = score_sample(method, ckpt, sample.image, **kwargs)
        rel = f"scores/{i:06d}.dosm"
        write_scoremap(out_dir / rel, scores)
        lines.append(json.dumps({"id": rec.id, "score": rel}, sort_keys=True, separators=(",", ":")))
    path = out_dir / "scores.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
