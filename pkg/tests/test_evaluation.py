import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denseood.datamodel import (
    DatasetManifest,
    ID_LABEL,
    IGNORE,
    ManifestRecord,
    OOD_LABEL,
    save_image,
    save_mask,
    write_scoremap,
)
from denseood.evaluation import (
    EvalReport,
    UndefinedMetricError,
    apply_imagewide_protocol,
    average_precision,
    build_report,
    evaluate_run,
    load_scores_manifest,
    ood_incidence,
    pixel_accuracy,
    pr_curve,
)


def brute_force_ap(scores: np.ndarray, labels: np.ndarray) -> float:
    """Independent oracle: precision/recall computed by counting at every
    distinct score value (descending), integrated step-wise."""
    order = np.argsort(scores)
    s = scores[order]
    y = labels[order]
    positives = int(y.sum())
    thresholds = np.unique(s)[::-1]
    ap = 0.0
    prev_recall = 0.0
    for t in thresholds:
        sel = scores >= t
        tp = int(labels[sel].sum())
        fp = int(sel.sum()) - tp
        precision = tp / (tp + fp)
        recall = tp / positives
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def random_instance(rng, max_px=2000):
    n = int(rng.integers(4, max_px))
    scores = rng.random(n).astype(np.float32)
    if rng.random() < 0.5:
        scores = np.round(scores, int(rng.integers(1, 3)))  # force ties
    labels = (rng.random(n) < rng.uniform(0.05, 0.9)).astype(np.uint8)
    if labels.sum() == 0:
        labels[0] = 1
    if labels.sum() == n:
        labels[0] = 0
    return scores.reshape(1, -1), labels.reshape(1, -1)


class TestAveragePrecision:
    def test_perfect_separation(self):
        s = np.array([[0.9, 0.8, 0.2, 0.1]], np.float32)
        t = np.array([[1, 1, 0, 0]], np.uint8)
        assert average_precision([s], [t]) == 1.0

    def test_single_tie_group(self):
        s = np.full((1, 4), 0.3, np.float32)
        t = np.array([[1, 0, 1, 0]], np.uint8)
        assert average_precision([s], [t]) == 0.5

    def test_worked_example(self):
        s = np.array([[0.9, 0.8, 0.3]], np.float32)
        t = np.array([[1, 0, 1]], np.uint8)
        assert average_precision([s], [t]) == pytest.approx(5 / 6, abs=1e-12)

    def test_ignore_excluded(self):
        s = np.array([[0.9, 0.99, 0.3]], np.float32)
        t = np.array([[1, IGNORE, 0]], np.uint8)
        assert average_precision([s], [t]) == 1.0

    def test_undefined_without_both_kinds(self):
        s = np.array([[0.9, 0.8]], np.float32)
        with pytest.raises(UndefinedMetricError):
            average_precision([s], [np.array([[1, 1]], np.uint8)])
        with pytest.raises(UndefinedMetricError):
            average_precision([s], [np.array([[0, 0]], np.uint8)])

    def test_against_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            s, t = random_instance(rng)
            got = average_precision([s], [t])
            want = brute_force_ap(s.ravel().astype(np.float64), t.ravel().astype(bool))
            assert got == pytest.approx(want, abs=1e-9)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s, t = random_instance(rng, max_px=300)
        base = average_precision([s], [t])
        transformed = (np.exp(2.5 * s.astype(np.float64)) + 1.0).astype(np.float32)
        assert average_precision([transformed], [t]) == pytest.approx(base, abs=1e-7)

    def test_pooling_order_independence(self):
        rng = np.random.default_rng(3)
        pairs = [random_instance(rng, 400) for _ in range(6)]
        ap1 = average_precision([p[0] for p in pairs], [p[1] for p in pairs])
        rev = pairs[::-1]
        ap2 = average_precision([p[0] for p in rev], [p[1] for p in rev])
        assert ap1 == pytest.approx(ap2, abs=1e-12)

    def test_constant_baseline_hits_prevalence_exactly(self):
        # the constant scorer forms one tie group: AP == P/(P+N); random
        # scorers land near prevalence (slightly below is possible for
        # anti-correlated orderings under the step-wise estimator)
        flat = np.full((1, 100), 0.5, np.float32)
        labels = (np.arange(100) < 37).astype(np.uint8).reshape(1, -1)
        assert average_precision([flat], [labels]) == pytest.approx(0.37, abs=1e-12)
        rng = np.random.default_rng(11)
        for _ in range(10):
            s, t = random_instance(rng, 500)
            prevalence = t.sum() / t.size
            assert average_precision([s], [t]) >= 0.5 * prevalence


class TestPrCurve:
    def test_separated_case_hits_corner(self):
        s = np.array([[0.9, 0.8, 0.2, 0.1]], np.float32)
        t = np.array([[1, 1, 0, 0]], np.uint8)
        curve = pr_curve([s], [t])
        assert any(p == 1.0 and r == 1.0 for _, p, r in curve.points)

    def test_recall_non_decreasing_and_ends_at_one(self):
        rng = np.random.default_rng(0)
        s, t = random_instance(rng)
        curve = pr_curve([s], [t])
        recalls = [r for _, _, r in curve.points]
        assert all(b >= a for a, b in zip(recalls, recalls[1:]))
        assert recalls[-1] == 1.0

    def test_area_equals_average_precision(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            s, t = random_instance(rng, 500)
            curve = pr_curve([s], [t])
            assert curve.area() == pytest.approx(average_precision([s], [t]), abs=1e-12)

    def test_csv_format(self):
        s = np.array([[0.9, 0.1]], np.float32)
        t = np.array([[1, 0]], np.uint8)
        csv = pr_curve([s], [t]).to_csv()
        assert csv.splitlines()[0] == "threshold,precision,recall"


class TestImagewideProtocol:
    def build_manifest(self, tmp_path, n=6, h=32, w=32):
        records = []
        for i in range(n):
            rel = f"img{i}.png"
            save_image(tmp_path / rel, np.zeros((h, w, 3), np.float32))
            records.append(ManifestRecord(f"im{i}", rel, None, None, "id"))
        m = DatasetManifest(records=records, metadata={})
        m.root = tmp_path
        return m

    def test_labeling_and_exclusions(self, tmp_path):
        m = self.build_manifest(tmp_path)
        out = dict(apply_imagewide_protocol(m, {"im4", "im5"}, {"im0"}))
        assert set(out) == {"im1", "im2", "im3", "im4", "im5"}
        assert (out["im4"] == OOD_LABEL).all()
        assert (out["im1"] == ID_LABEL).all()
        # positives count: 2 negative images of 32x32 pixels each
        total_pos = sum((v == OOD_LABEL).sum() for v in out.values())
        assert total_pos == 2 * 32 * 32

    def test_exclusion_drops_exact_pixel_count(self, tmp_path):
        m = self.build_manifest(tmp_path)
        full = dict(apply_imagewide_protocol(m, {"im5"}))
        sel = dict(apply_imagewide_protocol(m, {"im5"}, {"im0", "im1"}))
        assert sum(v.size for v in full.values()) - sum(v.size for v in sel.values()) == 2 * 32 * 32

    def test_unknown_ids_rejected(self, tmp_path):
        m = self.build_manifest(tmp_path)
        with pytest.raises(ValueError):
            list(apply_imagewide_protocol(m, {"nope"}))
        with pytest.raises(ValueError):
            list(apply_imagewide_protocol(m, {"im1"}, {"ghost"}))

    def test_empty_negatives_leads_to_undefined_metric(self, tmp_path):
        m = self.build_manifest(tmp_path, n=2)
        masks = [mask for _, mask in apply_imagewide_protocol(m, set())]
        scores = [np.random.default_rng(0).random(mask.shape).astype(np.float32) for mask in masks]
        with pytest.raises(UndefinedMetricError):
            average_precision(scores, masks)


class TestThresholdMetrics:
    def test_incidence_at_extreme_thresholds(self):
        scores = np.random.default_rng(0).random((20, 20)).astype(np.float32)
        assert ood_incidence(scores, -1.0) == 1.0
        assert ood_incidence(scores, 2.0) == 0.0

    def test_perfect_scorer_accuracy(self):
        truths = np.zeros((10, 10), np.uint8)
        truths[:5] = OOD_LABEL
        scores = np.where(truths == OOD_LABEL, 0.9, 0.1).astype(np.float32)
        assert pixel_accuracy(scores, truths, 0.5) == 1.0

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(5)
        scores = rng.random((100, 100)).astype(np.float32)
        truths = (rng.random((100, 100)) < 0.5).astype(np.uint8)
        acc = pixel_accuracy(scores, truths, 0.5)
        assert abs(acc - 0.5) < 0.05

    def test_ignore_excluded_from_accuracy(self):
        truths = np.full((4, 4), IGNORE, np.uint8)
        truths[0, 0] = OOD_LABEL
        scores = np.full((4, 4), 0.9, np.float32)
        assert pixel_accuracy(scores, truths, 0.5) == 1.0

    def test_nonfinite_threshold_rejected(self):
        with pytest.raises(ValueError):
            ood_incidence(np.zeros((2, 2), np.float32), float("nan"))


class TestReports:
    def build_run(self, tmp_path, tag="a"):
        rng = np.random.default_rng(hash(tag) % 2**32)
        data_dir = tmp_path / f"data-{tag}"
        data_dir.mkdir()
        records = []
        lines = [json.dumps({"meta": {"method": "m"}})]
        score_dir = tmp_path / f"scores-{tag}"
        (score_dir / "scores").mkdir(parents=True)
        for i in range(4):
            img = rng.random((24, 24, 3)).astype(np.float32)
            mask = (rng.random((24, 24)) < 0.3).astype(np.uint8)
            save_image(data_dir / f"i{i}.png", img)
            save_mask(data_dir / f"m{i}.png", mask)
            records.append(ManifestRecord(f"s{i}", f"i{i}.png", None, f"m{i}.png", "mixed"))
            scores = rng.random((24, 24)).astype(np.float32)
            write_scoremap(score_dir / "scores" / f"{i}.dosm", scores)
            lines.append(json.dumps({"id": f"s{i}", "score": f"scores/{i}.dosm"}))
        manifest = DatasetManifest(records=records, metadata={"name": tag})
        manifest.save(data_dir / "manifest.jsonl")
        (score_dir / "scores.jsonl").write_text("\n".join(lines) + "\n")
        return {
            "method": "m",
            "dataset": tag,
            "protocol": "masks",
            "scores_manifest": str(score_dir / "scores.jsonl"),
            "truth": {"kind": "masks", "manifest": str(data_dir / "manifest.jsonl")},
        }

    def test_single_run_report(self, tmp_path):
        run = self.build_run(tmp_path)
        report = build_report([run], tmp_path / "report")
        assert len(report.rows) == 1
        assert 0.0 <= report.rows[0]["ap"] <= 1.0
        assert (tmp_path / "report" / "report.md").exists()
        assert (tmp_path / "report" / "pr" / "m-a-masks.csv").exists()
        assert (tmp_path / "report" / "pr" / "m-a-masks.svg").exists()

    def test_report_ap_matches_direct_recomputation(self, tmp_path):
        run = self.build_run(tmp_path, "b")
        row, _ = evaluate_run(run)
        _, items = load_scores_manifest(run["scores_manifest"])
        from denseood.datamodel import load_mask, read_scoremap

        truth_manifest = DatasetManifest.load(run["truth"]["manifest"])
        scores = [read_scoremap(p) for _, p in items]
        truths = [load_mask(truth_manifest.resolve(r.ood)) for r in truth_manifest.records]
        assert row["ap"] == pytest.approx(average_precision(scores, truths), abs=1e-12)

    def test_byte_identical_reports(self, tmp_path):
        run = self.build_run(tmp_path, "c")
        build_report([run], tmp_path / "r1")
        build_report([run], tmp_path / "r2")
        assert (tmp_path / "r1" / "report.md").read_bytes() == (tmp_path / "r2" / "report.md").read_bytes()
        assert (tmp_path / "r1" / "report.json").read_bytes() == (tmp_path / "r2" / "report.json").read_bytes()

    def test_missing_inputs_refused(self, tmp_path):
        run = self.build_run(tmp_path, "d")
        run["scores_manifest"] = str(tmp_path / "ghost.jsonl")
        with pytest.raises(FileNotFoundError) as e:
            build_report([run], tmp_path / "r")
        assert "ghost" in str(e.value)
        assert not (tmp_path / "r" / "report.md").exists()

    def test_markdown_table_shape(self, tmp_path):
        report = EvalReport(rows=[{"method": "x", "dataset": "d", "protocol": "masks",
                                   "ap": 0.5, "prevalence": 0.1, "positives": 10, "negatives": 90}])
        md = report.to_markdown()
        assert md.startswith("| method | dataset |")
        assert "0.5000" in md
