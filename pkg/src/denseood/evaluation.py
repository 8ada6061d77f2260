"""Dense outlier-detection metrics and reports.

Average precision pools pixels across all images, sorts by score, treats
equal scores as one threshold group, and integrates precision step-wise
over recall:  AP = sum_k (R_k - R_{k-1}) * P_k.  This makes the estimator
independent of the ordering of tied pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np
from PIL import Image as PilImage

from .datamodel import (
    DatasetManifest,
    ID_LABEL,
    IGNORE,
    OOD_LABEL,
    read_scoremap,
)


class UndefinedMetricError(ValueError):
    """Average precision needs at least one positive and one negative pixel."""


def _pool(scores: Iterable[np.ndarray], truths: Iterable[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    score_parts = []
    label_parts = []
    for s, t in zip(scores, truths, strict=True):
        s = np.asarray(s)
        t = np.asarray(t)
        if s.shape != t.shape:
            raise ValueError(f"score map {s.shape} does not match truth {t.shape}")
        keep = t != IGNORE
        score_parts.append(s[keep].astype(np.float64).ravel())
        label_parts.append((t[keep] == OOD_LABEL).ravel())
    if not score_parts:
        raise UndefinedMetricError("no pixels to evaluate")
    return np.concatenate(score_parts), np.concatenate(label_parts)


def _group_counts(pooled_scores: np.ndarray, labels: np.ndarray):
    """Unique thresholds (descending) with cumulative TP/FP counts."""
    order = np.argsort(-pooled_scores, kind="stable")
    s = pooled_scores[order]
    y = labels[order]
    # boundaries of tied-score groups
    distinct = np.concatenate(([True], s[1:] != s[:-1]))
    group_last = np.concatenate((np.flatnonzero(distinct)[1:] - 1, [len(s) - 1]))
    tp = np.cumsum(y)[group_last].astype(np.float64)
    fp = np.cumsum(~y)[group_last].astype(np.float64)
    thresholds = s[distinct]
    return thresholds, tp, fp


def _ap_from_groups(tp: np.ndarray, fp: np.ndarray, positives: float) -> float:
    recall = tp / positives
    precision = tp / (tp + fp)
    prev_recall = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev_recall) * precision))


def average_precision(scores: Iterable[np.ndarray], truths: Iterable[np.ndarray]) -> float:
    """Pooled-pixel average precision with tie groups; outliers are positive."""
    pooled, labels = _pool(scores, truths)
    positives = int(labels.sum())
    negatives = labels.size - positives
    if positives == 0 or negatives == 0:
        raise UndefinedMetricError(
            f"undefined metric: {positives} positive and {negatives} negative pixels"
        )
    _, tp, fp = _group_counts(pooled, labels)
    return _ap_from_groups(tp, fp, positives)


@dataclass
class PRCurve:
    """Threshold-indexed points; recall grows as the threshold drops."""

    points: list[tuple[float, float, float]]  # (threshold, precision, recall)
    positives: int
    negatives: int

    def area(self) -> float:
        prev_r = 0.0
        total = 0.0
        for _, p, r in self.points:
            total += (r - prev_r) * p
            prev_r = r
        return total

    def to_csv(self) -> str:
        lines = ["threshold,precision,recall"]
        lines.extend(f"{t:.9g},{p:.9g},{r:.9g}" for t, p, r in self.points)
        return "\n".join(lines) + "\n"

    def to_svg(self, width: int = 320, height: int = 240) -> str:
        pts = " ".join(
            f"{20 + r * (width - 40):.1f},{height - 20 - p * (height - 40):.1f}"
            for _, p, r in self.points
        )
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
            f'<rect x="20" y="20" width="{width - 40}" height="{height - 40}"'
            ' fill="none" stroke="#888"/>'
            f'<polyline points="{pts}" fill="none" stroke="#c22" stroke-width="1.5"/>'
            "</svg>\n"
        )


def pr_curve(scores: Iterable[np.ndarray], truths: Iterable[np.ndarray]) -> PRCurve:
    pooled, labels = _pool(scores, truths)
    positives = int(labels.sum())
    negatives = labels.size - positives
    if positives == 0 or negatives == 0:
        raise UndefinedMetricError(
            f"undefined metric: {positives} positive and {negatives} negative pixels"
        )
    thresholds, tp, fp = _group_counts(pooled, labels)
    recall = tp / positives
    precision = tp / (tp + fp)
    points = [(float(t), float(p), float(r)) for t, p, r in zip(thresholds, precision, recall)]
    return PRCurve(points=points, positives=positives, negatives=negatives)


# ---------------------------------------------------------------------------
# image-wide protocol


def apply_imagewide_protocol(
    manifest: DatasetManifest,
    negative_ids: set[str],
    exclusions: Optional[set[str]] = None,
) -> Iterator[tuple[str, np.ndarray]]:
    """All-outlier masks for negative images, all-inlier otherwise.

    Excluded ids are skipped entirely (the "selection" protocol); unknown
    ids in either set are an error.
    """
    exclusions = exclusions or set()
    known = {r.id for r in manifest.records}
    for name, ids in (("negative_ids", negative_ids), ("exclusions", exclusions)):
        unknown = set(ids) - known
        if unknown:
            raise ValueError(f"{name} not in manifest: {sorted(unknown)[:5]}")
    for rec in manifest.records:
        if rec.id in exclusions:
            continue
        with PilImage.open(manifest.resolve(rec.image)) as im:
            w, h = im.size
        value = OOD_LABEL if rec.id in negative_ids else ID_LABEL
        yield rec.id, np.full((h, w), value, dtype=np.uint8)


def pixel_accuracy(scores: np.ndarray, truths: np.ndarray, threshold: float) -> float:
    """Fraction of non-ignored pixels where (score > t) matches the truth."""
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    valid = truths != IGNORE
    pred = scores[valid] > threshold
    actual = truths[valid] == OOD_LABEL
    return float((pred == actual).mean()) if valid.any() else float("nan")


def ood_incidence(scores: np.ndarray, threshold: float) -> float:
    """Fraction of pixels scored as outliers at the threshold."""
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    return float((scores > threshold).mean())


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows}, sort_keys=True, indent=2) + "\n"

    def to_markdown(self) -> str:
        if not self.rows:
            return "(empty report)\n"
        cols = ["method", "dataset", "protocol", "ap", "prevalence", "positives", "negatives"]
        lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
        for row in self.rows:
            cells = []
            for c in cols:
                v = row.get(c, "")
                cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    def lookup(self, method: str, dataset: str, protocol: Optional[str] = None) -> dict:
        for row in self.rows:
            if row["method"] == method and row["dataset"] == dataset:
                if protocol is None or row["protocol"] == protocol:
                    return row
        raise KeyError((method, dataset, protocol))


def load_scores_manifest(path: Path) -> tuple[dict, list[tuple[str, Path]]]:
    path = Path(path)
    meta: dict = {}
    items: list[tuple[str, Path]] = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        if set(doc.keys()) == {"meta"}:
            meta = doc["meta"]
            continue
        items.append((doc["id"], path.parent / doc["score"]))
    return meta, items


def _truth_stream(truth: dict) -> list[tuple[str, np.ndarray]]:
    manifest = DatasetManifest.load(Path(truth["manifest"]))
    kind = truth.get("kind", "masks")
    if kind == "imagewide":
        return list(
            apply_imagewide_protocol(
                manifest,
                set(truth["negative_ids"]),
                set(truth.get("exclusions", [])),
            )
        )
    pairs = []
    from .datamodel import load_mask, validate_ood

    for i, rec in enumerate(manifest.records):
        if rec.ood is None:
            raise ValueError(f"record {rec.id} has no truth mask")
        pairs.append((rec.id, validate_ood(load_mask(manifest.resolve(rec.ood)))))
    return pairs


def evaluate_run(run: dict) -> tuple[dict, PRCurve]:
    """AP for one (method, dataset) run joining scores to truths by id."""
    _, score_items = load_scores_manifest(Path(run["scores_manifest"]))
    truth_pairs = dict(_truth_stream(run["truth"]))
    scores = []
    truths = []
    for sid, spath in score_items:
        if sid not in truth_pairs:
            continue
        scores.append(read_scoremap(spath))
        truths.append(truth_pairs[sid])
    if not scores:
        raise ValueError(f"no overlapping ids between scores and truths for {run}")
    curve = pr_curve(scores, truths)
    ap = average_precision(scores, truths)
    row = {
        "method": run["method"],
        "dataset": run["dataset"],
        "protocol": run.get("protocol", "masks"),
        "ap": ap,
        "positives": curve.positives,
        "negatives": curve.negatives,
        "prevalence": curve.positives / (curve.positives + curve.negatives),
    }
    return row, curve


def build_report(runs: list[dict], out_dir: Path, svg: bool = True) -> EvalReport:
    """Evaluate all runs; refuse to emit anything if any input is missing."""
    out_dir = Path(out_dir)
    missing = [str(r["scores_manifest"]) for r in runs if not Path(r["scores_manifest"]).exists()]
    missing += [str(r["truth"]["manifest"]) for r in runs if not Path(r["truth"]["manifest"]).exists()]
    if missing:
        raise FileNotFoundError("missing report inputs: " + ", ".join(sorted(set(missing))))

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "pr").mkdir(exist_ok=True)
    report = EvalReport()
    for run in runs:
        row, curve = evaluate_run(run)
        report.rows.append(row)
        stem = f"{row['method']}-{row['dataset']}-{row['protocol']}"
        (out_dir / "pr" / f"{stem}.csv").write_text(curve.to_csv(), encoding="utf-8")
        if svg:
            (out_dir / "pr" / f"{stem}.svg").write_text(curve.to_svg(), encoding="utf-8")
    (out_dir / "report.md").write_text(report.to_markdown(), encoding="utf-8")
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    return report
