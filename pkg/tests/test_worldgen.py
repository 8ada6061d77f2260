import numpy as np
import pytest

from denseood.datamodel import DatasetManifest, IGNORE, OOD_LABEL
from denseood.worldgen import (
    CAR,
    ROAD,
    WorldConfig,
    chi2_distance,
    gen_background_image,
    gen_dataset,
    gen_inlier_scene,
    pixel_histogram,
)

FAST = WorldConfig(seed=11, inlier_size=(64, 128), background_size=(48, 48))


class TestInlierScenes:
    def test_purity(self):
        a = gen_inlier_scene(FAST, 5)
        b = gen_inlier_scene(FAST, 5)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.semantic, b.semantic)

    def test_distinct_indices_differ(self):
        a = gen_inlier_scene(FAST, 0)
        b = gen_inlier_scene(FAST, 1)
        assert not np.array_equal(a.image, b.image)

    def test_road_always_present(self):
        for i in range(50):
            s = gen_inlier_scene(FAST, i)
            assert (s.semantic == ROAD).any()

    def test_car_presence_rate(self):
        # frozen regression bound: cars in at least 60% of default scenes
        cfg = WorldConfig(seed=0)
        hits = sum((gen_inlier_scene(cfg, i).semantic == CAR).any() for i in range(1000))
        assert hits >= 600

    def test_values_in_range(self):
        s = gen_inlier_scene(FAST, 3)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert np.isfinite(s.image).all()

    def test_foreign_shapes_marked(self):
        cfg = WorldConfig(seed=2, inlier_size=(64, 128), foreign_rate=1.0)
        s = gen_inlier_scene(cfg, 0)
        assert s.meta.get("foreign_px", 0) > 0
        assert (s.ood == OOD_LABEL).sum() == s.meta["foreign_px"]
        assert (s.semantic[s.ood == OOD_LABEL] == IGNORE).all()

    def test_negative_index_rejected(self):
        with pytest.raises(ValueError):
            gen_inlier_scene(FAST, -1)


class TestBackgroundImages:
    def test_purity(self):
        a = gen_background_image(FAST, 9)
        b = gen_background_image(FAST, 9)
        np.testing.assert_array_equal(a.image, b.image)
        assert a.meta["bbox"] == b.meta["bbox"]

    def test_bbox_fraction_window(self):
        h, w = FAST.background_size
        for i in range(200):
            s = gen_background_image(FAST, i)
            r0, c0, r1, c1 = s.meta["bbox"]
            frac = (r1 - r0) * (c1 - c0) / (h * w)
            assert 0.20 <= frac <= 0.70
            assert 0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w

    def test_car_leak_binomial_bound(self):
        # 10000 draws at leak 0.01: 99% interval generously widened to [60, 140]
        cfg = WorldConfig(seed=5, background_size=(48, 48), car_leak=0.01)
        cars = sum(gen_background_image(cfg, i).meta["object"] == "car" for i in range(10000))
        assert 60 <= cars <= 140

    def test_object_mask_inside_bbox(self):
        s = gen_background_image(FAST, 4)
        mask = s.meta["_object_mask"]
        r0, c0, r1, c1 = s.meta["bbox"]
        outside = mask.copy()
        outside[r0:r1, c0:c1] = False
        assert not outside.any()
        assert mask.any()


class TestGenDataset:
    def test_manifest_roles_and_count(self, tmp_path):
        m = gen_dataset(FAST, 5, "background", tmp_path / "bg")
        assert len(m) == 5
        assert all(r.role == "ood" for r in m.records)
        assert all("bbox" in r.ext for r in m.records)

    def test_inlier_roles(self, tmp_path):
        m = gen_dataset(FAST, 6, "inlier", tmp_path / "in")
        assert all(r.role in ("id", "mixed") for r in m.records)
        for r in m.records:
            assert (r.role == "mixed") == bool(r.ext.get("foreign_px"))

    def test_byte_identical_regeneration(self, tmp_path):
        gen_dataset(FAST, 4, "inlier", tmp_path / "a")
        gen_dataset(FAST, 4, "inlier", tmp_path / "b")
        a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
        b = (tmp_path / "b" / "manifest.jsonl").read_bytes()
        assert a == b
        img_a = (tmp_path / "a" / "images" / "000002.png").read_bytes()
        img_b = (tmp_path / "b" / "images" / "000002.png").read_bytes()
        assert img_a == img_b

    def test_zero_samples_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            gen_dataset(FAST, 0, "inlier", tmp_path / "x")

    def test_loadable_samples(self, tmp_path):
        m = gen_dataset(FAST, 3, "inlier", tmp_path / "in")
        reloaded = DatasetManifest.load(tmp_path / "in" / "manifest.jsonl")
        s = reloaded.load_sample(0, class_count=8)
        assert s.image.shape == (64, 128, 3)
        assert s.semantic.shape == (64, 128)


class TestWorldSeparation:
    def test_chi2_distance_exceeds_bound(self, tmp_path):
        # frozen reference bound; guards against a degenerate generator
        gen_dataset(FAST, 30, "inlier", tmp_path / "in")
        gen_dataset(FAST, 30, "background", tmp_path / "bg")
        p = pixel_histogram(DatasetManifest.load(tmp_path / "in" / "manifest.jsonl"))
        q = pixel_histogram(DatasetManifest.load(tmp_path / "bg" / "manifest.jsonl"))
        assert chi2_distance(p, q) > 0.15

    def test_contention_rates(self):
        cfg = WorldConfig(seed=1, background_size=(48, 48), car_leak=0.02)
        cars = sum(gen_background_image(cfg, i).meta["object"] == "car" for i in range(2000))
        # binomial mean 40, generous 5-sigma window
        assert 10 <= cars <= 75


class TestConfig:
    def test_presets(self):
        narrow = WorldConfig.preset("narrow", seed=1)
        wide = WorldConfig.preset("wide", seed=1)
        assert wide.diversity > narrow.diversity
        with pytest.raises(ValueError):
            WorldConfig.preset("nope")

    def test_dict_roundtrip(self):
        cfg = WorldConfig.preset("wide", seed=9)
        assert WorldConfig.from_dict(cfg.to_dict()) == cfg

    def test_invalid(self):
        with pytest.raises(ValueError):
            WorldConfig(class_count=1)
        with pytest.raises(ValueError):
            WorldConfig(families=())
