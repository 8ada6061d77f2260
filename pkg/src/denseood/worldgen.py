"""Procedural stand-in worlds.

Two generators share one seed-derivation scheme: an "inlier" world of
band-structured street scenes with dense semantic labels, and a "background"
world of diverse unstructured textures, each carrying one salient object with
a known bounding box.  Both are pure functions of (config, index), so whole
datasets regenerate byte-identically.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .datamodel import (
    ConfigurationError,
    DatasetManifest,
    GENERATOR_VERSION,
    ID_LABEL,
    IGNORE,
    ManifestRecord,
    OOD_LABEL,
    Sample,
    derive_seed,
    save_image,
    save_mask,
)

CLASS_NAMES = ("sky", "building", "vegetation", "road", "sidewalk", "marking", "car", "person")
SKY, BUILDING, VEGETATION, ROAD, SIDEWALK, MARKING, CAR, PERSON = range(8)

TEXTURE_FAMILIES = ("noise", "polygons", "checker", "blobs", "gradient", "panel")


def _default_ranges() -> dict:
    return {
        "sky_frac": (0.16, 0.34),
        "facade_frac": (0.44, 0.60),
        "walk_frac": (0.03, 0.09),
        "car_w_frac": (0.07, 0.17),
        "person_h_frac": (0.07, 0.14),
        "foreign_frac": (0.003, 0.022),
        "noise_sigma": (0.008, 0.030),
    }


@dataclass(frozen=True)
class WorldConfig:
    """Knobs for both worlds; `seed` pins an entire dataset."""

    seed: int = 0
    inlier_size: tuple[int, int] = (128, 256)
    background_size: tuple[int, int] = (128, 128)
    class_count: int = 8
    diversity: float = 0.5
    distortion_rate: float = 0.0
    car_leak: float = 0.01
    person_leak: float = 0.2
    foreign_rate: float = 0.05
    max_cars: int = 4
    max_persons: int = 3
    bbox_frac: tuple[float, float] = (0.20, 0.70)
    families: tuple[str, ...] = TEXTURE_FAMILIES
    ranges: dict = field(default_factory=_default_ranges)

    def __post_init__(self):
        if self.class_count < 2:
            raise ConfigurationError("class_count must be >= 2")
        if not self.families:
            raise ConfigurationError("at least one texture family required")
        for k, (lo, hi) in self.ranges.items():
            if not lo <= hi:
                raise ConfigurationError(f"empty range for {k}")

    @staticmethod
    def preset(name: str, seed: int = 0, **overrides) -> "WorldConfig":
        """Named variants: a narrow world, a diverse one, and a distorted one."""
        presets = {
            "narrow": dict(diversity=0.25),
            "wide": dict(diversity=1.0),
            "distorted": dict(diversity=0.35, distortion_rate=0.6),
        }
        if name not in presets:
            raise ConfigurationError(f"unknown world preset {name!r}")
        kwargs = dict(presets[name])
        kwargs.update(overrides)
        return WorldConfig(seed=seed, **kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(doc: dict) -> "WorldConfig":
        doc = dict(doc)
        for key in ("inlier_size", "background_size", "bbox_frac", "families"):
            if key in doc:
                doc[key] = tuple(doc[key])
        if "ranges" in doc:
            doc["ranges"] = {k: tuple(v) for k, v in doc["ranges"].items()}
        return WorldConfig(**doc)


# ---------------------------------------------------------------------------
# low-level painting


def _grid(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return ys, xs


def _smooth_noise(rng, h, w, cell, channels=3):
    """Correlated noise: coarse uniform grid upsampled bilinearly."""
    gh, gw = max(2, h // cell), max(2, w // cell)
    coarse = rng.random((gh, gw, channels)).astype(np.float32)
    yi = np.linspace(0, gh - 1, h, dtype=np.float32)
    xi = np.linspace(0, gw - 1, w, dtype=np.float32)
    y0 = np.clip(yi.astype(int), 0, gh - 2)
    x0 = np.clip(xi.astype(int), 0, gw - 2)
    fy = (yi - y0)[:, None, None]
    fx = (xi - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def _ellipse_mask(h, w, cy, cx, ry, rx):
    ys, xs = _grid(h, w)
    ry = max(ry, 1e-3)
    rx = max(rx, 1e-3)
    return ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0


def _paint(image, mask, color):
    image[mask] = np.asarray(color, dtype=np.float32)


def _jitter_color(rng, base, amount):
    c = np.asarray(base, dtype=np.float32) + rng.uniform(-amount, amount, 3).astype(np.float32)
    return np.clip(c, 0.0, 1.0)


def _draw_car(image, rng, ground_y, cx, width, color) -> np.ndarray:
    """Paint a side-view car; returns the painted boolean mask."""
    h, w = image.shape[:2]
    body_h = max(3, int(width * rng.uniform(0.30, 0.42)))
    cab_h = max(2, int(body_h * rng.uniform(0.6, 0.9)))
    wheel_r = max(1.5, width * 0.11)
    top = ground_y - body_h - cab_h
    left = cx - width // 2
    mask = np.zeros((h, w), dtype=bool)

    def rect(r0, c0, r1, c1):
        r0, r1 = max(0, r0), min(h, r1)
        c0, c1 = max(0, c0), min(w, c1)
        if r0 < r1 and c0 < c1:
            mask[r0:r1, c0:c1] = True

    rect(top + cab_h, left, ground_y, left + width)
    cab_inset = int(width * rng.uniform(0.15, 0.25))
    rect(top, left + cab_inset, top + cab_h + 1, left + width - cab_inset)
    for wx in (left + int(width * 0.22), left + int(width * 0.78)):
        mask |= _ellipse_mask(h, w, ground_y - 1, wx, wheel_r, wheel_r)
    _paint(image, mask, color)
    # windows darker than the body
    win = np.zeros((h, w), dtype=bool)
    wr0 = top + 1
    wr1 = top + max(2, cab_h - 1)
    win[max(0, wr0) : min(h, wr1), max(0, left + cab_inset + 1) : min(w, left + width - cab_inset - 1)] = True
    _paint(image, win & mask, np.asarray(color) * 0.4)
    return mask


def _draw_person(image, rng, ground_y, cx, height, color) -> np.ndarray:
    h, w = image.shape[:2]
    body_w = max(2, int(height * 0.28))
    head_r = max(1.2, height * 0.18)
    mask = np.zeros((h, w), dtype=bool)
    r0 = max(0, ground_y - height)
    c0 = max(0, cx - body_w // 2)
    mask[r0:ground_y, c0 : min(w, c0 + body_w)] = True
    mask |= _ellipse_mask(h, w, ground_y - height, cx, head_r, head_r)
    _paint(image, mask, color)
    return mask


def _draw_star(h, w, cy, cx, radius, points, rng):
    """Spiky polygon mask (radial threshold), foreign to the street grammar."""
    ys, xs = _grid(h, w)
    dy = ys - cy
    dx = xs - cx
    ang = np.arctan2(dy, dx)
    rr = np.sqrt(dy**2 + dx**2)
    wobble = 0.55 + 0.45 * np.cos(points * ang + rng.uniform(0, 2 * np.pi))
    return rr <= radius * wobble


# ---------------------------------------------------------------------------
# inlier world


def gen_inlier_scene(config: WorldConfig, index: int) -> Sample:
    """Band-structured street scene with dense labels; pure in (seed, index)."""
    if index < 0:
        raise ValueError("index must be >= 0")
    if config.class_count < 8:
        raise ConfigurationError("the street grammar needs class_count >= 8")
    rng = np.random.default_rng(derive_seed(config.seed, "inlier", index))
    h, w = config.inlier_size
    jit = 0.03 + 0.10 * config.diversity
    r = config.ranges

    image = np.zeros((h, w, 3), dtype=np.float32)
    semantic = np.full((h, w), SKY, dtype=np.uint8)

    sky_h = int(h * rng.uniform(*r["sky_frac"]))
    facade_b = int(h * rng.uniform(*r["facade_frac"]))
    walk_b = facade_b + max(2, int(h * rng.uniform(*r["walk_frac"])))

    # sky: vertical gradient, lighter toward the horizon
    sky_c = _jitter_color(rng, (0.55, 0.70, 0.88), jit)
    grad = np.linspace(0.0, rng.uniform(0.08, 0.2), sky_h, dtype=np.float32)[:, None, None]
    image[:sky_h] = np.clip(sky_c + grad, 0, 1)

    # facade band: building segments with window grids
    semantic[sky_h:facade_b] = BUILDING
    x = 0
    while x < w:
        seg_w = int(rng.uniform(0.08, 0.28) * w)
        seg_w = max(6, min(seg_w, w - x))
        col = _jitter_color(rng, (0.46, 0.43, 0.40), jit + 0.06)
        image[sky_h:facade_b, x : x + seg_w] = col
        step_y = rng.integers(5, 9)
        step_x = rng.integers(5, 9)
        win = np.asarray(col) * 0.55
        image[sky_h + 2 : facade_b - 1 : step_y, x + 2 : x + seg_w - 1 : step_x] = win
        image[sky_h + 3 : facade_b : step_y, x + 2 : x + seg_w - 1 : step_x] = win
        x += seg_w

    # vegetation: blobby replacements of some facade segments
    for _ in range(rng.integers(0, 4)):
        vx = int(rng.uniform(0, w * 0.9))
        vw = int(rng.uniform(0.05, 0.15) * w)
        vtop = sky_h - rng.integers(0, max(2, sky_h // 3))
        blob = _smooth_noise(rng, facade_b - vtop, min(vw, w - vx), 4)
        green = _jitter_color(rng, (0.18, 0.45, 0.20), jit)
        region = (slice(vtop, facade_b), slice(vx, vx + blob.shape[1]))
        image[region] = np.clip(green * (0.7 + 0.6 * blob[:, :, :1]), 0, 1)
        semantic[region] = VEGETATION

    # sidewalk and road bands
    walk_c = _jitter_color(rng, (0.58, 0.57, 0.54), jit)
    road_c = _jitter_color(rng, (0.30, 0.30, 0.33), jit)
    image[facade_b:walk_b] = walk_c
    semantic[facade_b:walk_b] = SIDEWALK
    road_shade = np.linspace(1.05, 0.9, h - walk_b, dtype=np.float32)[:, None, None]
    image[walk_b:] = np.clip(road_c * road_shade, 0, 1)
    semantic[walk_b:] = ROAD

    # dashed lane marking across the road band
    if rng.random() < 0.85:
        my = walk_b + int((h - walk_b) * rng.uniform(0.35, 0.7))
        dash_w = rng.integers(8, 16)
        gap = rng.integers(6, 14)
        mark_c = _jitter_color(rng, (0.86, 0.86, 0.78), jit / 2)
        phase = rng.integers(0, dash_w + gap)
        xs = np.arange(w)
        on = ((xs + phase) % (dash_w + gap)) < dash_w
        thick = int(rng.integers(2, 4))
        image[my : my + thick, on] = mark_c
        semantic[my : my + thick, on] = MARKING

    # cars along the road; occasionally parked up on the sidewalk band
    n_cars = int(rng.integers(0, config.max_cars + 1))
    car_palette = [(0.70, 0.12, 0.12), (0.12, 0.25, 0.60), (0.75, 0.75, 0.78), (0.15, 0.15, 0.17), (0.72, 0.55, 0.12)]
    for _ in range(n_cars):
        cw = int(w * rng.uniform(*r["car_w_frac"]))
        if rng.random() < 0.2:
            gy = int(rng.uniform(min(facade_b + 2, h - 3), min(walk_b + cw * 0.35, h - 2)))
        else:
            gy = int(rng.uniform(walk_b + cw * 0.35, h - 2))
        cx = int(rng.uniform(cw // 2, w - cw // 2))
        color = _jitter_color(rng, car_palette[rng.integers(0, len(car_palette))], jit)
        mask = _draw_car(image, rng, gy, cx, cw, color)
        semantic[mask] = CAR

    # pedestrians on the sidewalk (sometimes on the road)
    for _ in range(int(rng.integers(0, config.max_persons + 1))):
        ph = int(h * rng.uniform(*r["person_h_frac"]))
        on_walk = rng.random() < 0.7
        lo, hi = (facade_b + ph * 0.5, walk_b + 2) if on_walk else (walk_b + ph, h - 1)
        gy = int(rng.uniform(min(lo, hi), hi))
        gy = min(h - 1, max(ph + 1, gy))
        cx = int(rng.uniform(3, w - 3))
        color = _jitter_color(rng, (0.25, 0.18, 0.22), jit + 0.08)
        mask = _draw_person(image, rng, gy, cx, ph, color)
        semantic[mask] = PERSON

    # occasionally a genuinely foreign shape wanders into the scene; it is
    # excluded from the semantic ontology and marked OOD in the ood mask
    ood = np.full((h, w), ID_LABEL, dtype=np.uint8)
    foreign_px = 0
    if rng.random() < config.foreign_rate:
        target = rng.uniform(*r["foreign_frac"]) * h * w
        radius = np.sqrt(target / np.pi) / 0.78
        cy = rng.uniform(facade_b, h - 3)
        cx = rng.uniform(radius, w - radius)
        mask = _draw_star(h, w, cy, cx, radius, int(rng.integers(5, 9)), rng)
        tex = _smooth_noise(rng, h, w, 3)
        hot = np.clip(tex * np.asarray(rng.uniform(0.5, 1.0, 3), dtype=np.float32) + 0.25, 0, 1)
        image[mask] = hot[mask]
        semantic[mask] = IGNORE
        ood[mask] = OOD_LABEL
        foreign_px = int(mask.sum())

    # aleatoric texture: illumination drift plus pixel noise
    drift = np.linspace(1 - 0.05, 1 + 0.05, w, dtype=np.float32)[None, :, None]
    sigma = rng.uniform(*r["noise_sigma"])
    image = image * drift + rng.normal(0, sigma, image.shape).astype(np.float32)

    distorted = False
    if rng.random() < config.distortion_rate:
        distorted = True
        kind = rng.integers(0, 3)
        if kind == 0:
            image = image + rng.normal(0, 0.09, image.shape).astype(np.float32)
        elif kind == 1:
            cast = np.asarray(rng.uniform(0.55, 1.35, 3), dtype=np.float32)
            image = image * cast
        else:
            ys, xs = _grid(h, w)
            d = np.sqrt(((ys - h / 2) / h) ** 2 + ((xs - w / 2) / w) ** 2)
            image = image * (1.1 - 0.9 * d[:, :, None]).astype(np.float32)

    image = np.clip(image, 0.0, 1.0)
    meta = {"variant": "inlier"}
    if foreign_px:
        meta["foreign_px"] = foreign_px
    if distorted:
        meta["distorted"] = True
    return Sample(
        id=f"inlier-{index:06d}",
        image=image,
        semantic=semantic,
        ood=ood if foreign_px else None,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# background world


def _canvas(rng, family, h, w):
    if family == "noise":
        cell = int(rng.integers(2, 12))
        base = _smooth_noise(rng, h, w, cell)
        tint = np.asarray(rng.uniform(0.3, 1.0, 3), dtype=np.float32)
        return np.clip(base * tint + rng.uniform(0, 0.2), 0, 1)
    if family == "polygons":
        img = np.full((h, w, 3), rng.uniform(0, 1, 3).astype(np.float32))
        for _ in range(rng.integers(4, 12)):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            ry, rx = rng.uniform(4, h / 2), rng.uniform(4, w / 2)
            ang = rng.uniform(0, np.pi)
            ys, xs = _grid(h, w)
            u = (ys - cy) * np.cos(ang) + (xs - cx) * np.sin(ang)
            v = -(ys - cy) * np.sin(ang) + (xs - cx) * np.cos(ang)
            mask = (np.abs(u) / ry + np.abs(v) / rx) <= 1.0
            img[mask] = rng.uniform(0, 1, 3).astype(np.float32)
        return img
    if family == "checker":
        cy = int(rng.integers(4, 25))
        cx = int(rng.integers(4, 25))
        ys, xs = _grid(h, w)
        cells = ((ys // cy) + (xs // cx)) % 2
        a = rng.uniform(0, 1, 3).astype(np.float32)
        b = rng.uniform(0, 1, 3).astype(np.float32)
        return np.where(cells[:, :, None] == 0, a, b).astype(np.float32)
    if family == "blobs":
        ys, xs = _grid(h, w)
        img = np.zeros((h, w, 3), dtype=np.float32)
        for _ in range(rng.integers(3, 9)):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            s = rng.uniform(6, 30)
            bump = np.exp(-(((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * s * s))).astype(np.float32)
            img += bump[:, :, None] * rng.uniform(0.2, 1.0, 3).astype(np.float32)
        return np.clip(img, 0, 1)
    if family == "gradient":
        ang = rng.uniform(0, 2 * np.pi)
        ys, xs = _grid(h, w)
        t = (ys * np.sin(ang) + xs * np.cos(ang)).astype(np.float32)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-6)
        a = rng.uniform(0, 1, 3).astype(np.float32)
        b = rng.uniform(0, 1, 3).astype(np.float32)
        img = t[:, :, None] * a + (1 - t[:, :, None]) * b
        return np.clip(img + rng.normal(0, 0.02, img.shape).astype(np.float32), 0, 1)
    if family == "panel":
        # muted flat fields with soft shading and thin seams; deliberately
        # close to street-surface textures (the overlap between the two
        # worlds that makes discrimination non-trivial)
        g = rng.uniform(0.25, 0.62)
        base = np.clip(g + rng.uniform(-0.04, 0.04, 3), 0, 1).astype(np.float32)
        img = np.tile(base, (h, w, 1))
        ys, xs = _grid(h, w)
        for _ in range(rng.integers(1, 4)):
            ang = rng.uniform(0, np.pi)
            t = (ys * np.sin(ang) + xs * np.cos(ang)).astype(np.float32)
            t = (t - t.min()) / max(t.max() - t.min(), 1e-6)
            img *= (1.0 + rng.uniform(-0.18, 0.18) * (t - 0.5))[:, :, None]
        for _ in range(rng.integers(2, 7)):
            if rng.random() < 0.5:
                r = int(rng.integers(0, h))
                img[r : r + int(rng.integers(1, 3)), :] *= rng.uniform(0.65, 0.85)
            else:
                c = int(rng.integers(0, w))
                img[:, c : c + int(rng.integers(1, 3))] *= rng.uniform(0.65, 0.85)
        img += rng.normal(0, rng.uniform(0.008, 0.02), img.shape).astype(np.float32)
        return np.clip(img, 0, 1)
    raise ConfigurationError(f"unknown texture family {family!r}")


def gen_background_image(config: WorldConfig, index: int) -> Sample:
    """Diverse texture image with one salient object and its bounding box."""
    if index < 0:
        raise ValueError("index must be >= 0")
    rng = np.random.default_rng(derive_seed(config.seed, "background", index))
    h, w = config.background_size
    family = config.families[int(rng.integers(0, len(config.families)))]
    image = _canvas(rng, family, h, w).astype(np.float32)

    # one object whose bbox covers a fixed fraction range of the canvas
    lo_frac, hi_frac = config.bbox_frac
    frac = rng.uniform(lo_frac, hi_frac)
    aspect = rng.uniform(0.6, 1.65)
    bh = int(np.clip(np.sqrt(frac * h * w * aspect), 8, h - 2))
    bw = int(np.clip(round(frac * h * w / bh), 8, w - 2))
    # rounding and clipping may push the box outside the fraction window;
    # nudge one side at a time until it is back inside
    for _ in range(h + w):
        if bh * bw < lo_frac * h * w and (bw < w - 2 or bh < h - 2):
            if bw < w - 2:
                bw += 1
            else:
                bh += 1
        elif bh * bw > hi_frac * h * w and (bw > 8 or bh > 8):
            if bw > 8:
                bw -= 1
            else:
                bh -= 1
        else:
            break
    r0 = int(rng.integers(1, h - bh))
    c0 = int(rng.integers(1, w - bw))

    is_car = rng.random() < config.car_leak
    if is_car:
        sub = image[r0 : r0 + bh, c0 : c0 + bw]
        color = _jitter_color(rng, (0.65, 0.15, 0.15), 0.2)
        obj = _draw_car(sub, rng, bh - 1, bw // 2, max(8, bw - 2), color)
        obj_mask = np.zeros((h, w), dtype=bool)
        obj_mask[r0 : r0 + bh, c0 : c0 + bw] = obj
    else:
        shape = rng.integers(0, 3)
        cy, cx = r0 + bh / 2, c0 + bw / 2
        if shape == 0:
            obj_mask = _ellipse_mask(h, w, cy, cx, bh / 2, bw / 2)
        elif shape == 1:
            obj_mask = _draw_star(h, w, cy, cx, min(bh, bw) / 2, int(rng.integers(4, 9)), rng)
        else:
            obj_mask = np.zeros((h, w), dtype=bool)
            obj_mask[r0 : r0 + bh, c0 : c0 + bw] = True
            ys, xs = _grid(h, w)
            rr = np.minimum(bh, bw) * 0.25
            for oy, ox in ((r0, c0), (r0, c0 + bw), (r0 + bh, c0), (r0 + bh, c0 + bw)):
                obj_mask &= ((ys - oy) ** 2 + (xs - ox) ** 2) > rr**2
        box = np.zeros((h, w), dtype=bool)
        box[r0 : r0 + bh, c0 : c0 + bw] = True
        obj_mask &= box
        tex_family = config.families[int(rng.integers(0, len(config.families)))]
        tex = _canvas(rng, tex_family, h, w)
        image[obj_mask] = np.clip(1.0 - tex[obj_mask] * 0.9, 0, 1)

    # incidental street-class content: some background images carry person
    # shapes besides the defining object (they stay unlabeled, like inlier
    # classes occurring in background-dataset photos)
    has_person = rng.random() < config.person_leak
    if has_person:
        for _ in range(int(rng.integers(1, 3))):
            ph = int(h * rng.uniform(0.12, 0.28))
            gy = int(rng.integers(ph + 1, h))
            cx = int(rng.integers(2, w - 2))
            color = _jitter_color(rng, (0.25, 0.18, 0.22), 0.1)
            _draw_person(image, rng, gy, cx, ph, color)

    image = np.clip(image + rng.normal(0, 0.01, image.shape).astype(np.float32), 0, 1)
    meta = {
        "bbox": [r0, c0, r0 + bh, c0 + bw],
        "bbox_frac": round(bh * bw / (h * w), 4),
        "family": family,
        "object": "car" if is_car else "generic",
        "person": bool(has_person),
    }
    return Sample(
        id=f"background-{index:06d}",
        image=image,
        semantic=None,
        ood=None,
        meta={**meta, "_object_mask": obj_mask},
    )


# ---------------------------------------------------------------------------
# dataset emission


def gen_dataset(config: WorldConfig, n: int, kind: str, out_dir: Path) -> DatasetManifest:
    """Render n samples, write PNGs and a manifest; order follows index."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind not in ("inlier", "background"):
        raise ValueError(f"kind must be 'inlier' or 'background', got {kind!r}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if kind == "inlier":
        (out_dir / "semantic").mkdir(exist_ok=True)
        (out_dir / "ood").mkdir(exist_ok=True)
    else:
        (out_dir / "objmask").mkdir(exist_ok=True)

    records = []
    for i in range(n):
        if kind == "inlier":
            s = gen_inlier_scene(config, i)
            img_rel = f"images/{i:06d}.png"
            sem_rel = f"semantic/{i:06d}.png"
            save_image(out_dir / img_rel, s.image)
            save_mask(out_dir / sem_rel, s.semantic)
            ood_rel = None
            role = "id"
            if s.ood is not None:
                ood_rel = f"ood/{i:06d}.png"
                save_mask(out_dir / ood_rel, s.ood)
                role = "mixed"
            ext = {k: v for k, v in s.meta.items() if not k.startswith("_")}
            records.append(ManifestRecord(s.id, img_rel, sem_rel, ood_rel, role, ext))
        else:
            s = gen_background_image(config, i)
            img_rel = f"images/{i:06d}.png"
            obj_rel = f"objmask/{i:06d}.png"
            save_image(out_dir / img_rel, s.image)
            obj = s.meta.pop("_object_mask")
            save_mask(out_dir / obj_rel, obj.astype(np.uint8) * 255)
            ext = dict(s.meta)
            ext["object_mask"] = obj_rel
            records.append(ManifestRecord(s.id, img_rel, None, None, "ood", ext))

    manifest = DatasetManifest(
        records=records,
        metadata={
            "name": f"{kind}-world",
            "seed": config.seed,
            "generator_version": GENERATOR_VERSION,
            "kind": kind,
            "config": config.to_dict(),
        },
    )
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def pixel_histogram(manifest: DatasetManifest, bins: int = 32, limit: Optional[int] = None) -> np.ndarray:
    """Pooled per-channel value histogram, normalized to sum 1."""
    counts = np.zeros((3, bins), dtype=np.float64)
    n = len(manifest) if limit is None else min(limit, len(manifest))
    for i in range(n):
        img = manifest.load_sample(i).image
        for c in range(3):
            counts[c] += np.histogram(img[:, :, c], bins=bins, range=(0.0, 1.0))[0]
    total = counts.sum()
    return (counts / total).reshape(-1)


def chi2_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric chi-squared distance between two normalized histograms."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    denom = p + q
    mask = denom > 0
    return float(0.5 * np.sum((p[mask] - q[mask]) ** 2 / denom[mask]))
