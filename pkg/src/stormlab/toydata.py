"""Procedural toy fixture for desk-scale runs.

Scenes are flat-shaded 64×64 pictures (sky, ground, a few objects). The
labeled set carries light, grey, uniform synthetic haze; the unlabeled
"real" set carries denser, tinted, depth-dependent haze, so a model trained
on the labeled pairs alone under-restores it. Every clean image is known, so
mock oracle judges can score restorations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .backends import (BackendRegistry, MockCaptioner, MockOracleRater, MockRewriter,
                       PixelStatEncoder, PooledRGBExtractor)
from .backends.mock import DEFAULT_SCENES
from .core import ImageSample, LabeledPair, Source, TrainConfig, UnlabeledSet, Weather, spawn_rngs
from .pseudodb import CandidateSet

PIXEL_FLOOR, PIXEL_CEIL = 0.03, 0.97


def render_scene(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    h = w = size
    y = np.linspace(0.0, 1.0, h)[:, None, None]
    sky = rng.uniform([0.35, 0.5, 0.7], [0.55, 0.7, 0.95])
    ground = rng.uniform([0.15, 0.25, 0.1], [0.45, 0.5, 0.35])
    horizon = rng.uniform(0.4, 0.6)
    img = np.where(y < horizon, sky * (0.8 + 0.2 * y / horizon), ground) * np.ones((h, w, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(3, 7)):
        colour = rng.uniform(0.05, 0.95, size=3)
        cy, cx = rng.uniform(0.2 * h, 0.9 * h), rng.uniform(0, w)
        if rng.random() < 0.5:
            hh, ww = rng.uniform(0.1 * h, 0.4 * h), rng.uniform(0.08 * w, 0.3 * w)
            mask = (np.abs(yy - cy) < hh / 2) & (np.abs(xx - cx) < ww / 2)
        else:
            r = rng.uniform(0.05 * h, 0.15 * h)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[mask] = colour
    img += 0.02 * np.sin(xx / rng.uniform(2.0, 5.0))[:, :, None]
    return np.clip(img, PIXEL_FLOOR, PIXEL_CEIL)


# -- degradations --------------------------------------------------------------

def apply_haze(clean: np.ndarray, transmission, airlight) -> np.ndarray:
    """Atmospheric scattering: I = J·t + A·(1 − t)."""
    t = np.asarray(transmission, dtype=np.float64)
    if t.ndim == 2:
        t = t[:, :, None]
    return np.clip(clean * t + np.asarray(airlight) * (1.0 - t), 0.0, 1.0)


def synthetic_haze_params(rng, size: int):
    grey = rng.uniform(0.75, 0.9)
    return np.full((size, size), rng.uniform(0.55, 0.85)), np.full(3, grey)


def real_haze_params(rng, size: int):
    airlight = rng.uniform(0.85, 0.97) * np.array([0.9, 0.95, 1.0])
    depth = np.linspace(1.0, 0.2, size)[:, None] * np.ones((1, size))
    return np.exp(-rng.uniform(0.6, 1.1) * depth), airlight


def apply_rain(clean: np.ndarray, rng) -> np.ndarray:
    h, w, _ = clean.shape
    mask = np.zeros((h, w))
    for _ in range(int(0.015 * h * w)):
        x, y0 = rng.integers(0, w), rng.integers(-8, h)
        length = rng.integers(6, 15)
        mask[max(0, y0):max(0, min(h, y0 + length)), x] = rng.uniform(0.5, 0.8)
    m = mask[:, :, None]
    return np.clip(clean * (1 - m) + 0.92 * m, 0.0, 1.0)


def apply_snow(clean: np.ndarray, rng) -> np.ndarray:
    h, w, _ = clean.shape
    out = clean.copy()
    for _ in range(int(0.02 * h * w)):
        y, x = rng.integers(0, h), rng.integers(0, w)
        r = rng.integers(0, 2)
        out[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1] = 1.0
    return out


# -- init candidates -------------------------------------------------------------

def smooth_restorer(degraded: np.ndarray) -> np.ndarray:
    return cv2.GaussianBlur(degraded, (0, 0), 1.5, borderType=cv2.BORDER_REFLECT)


def noisy_inverse_restorer(degraded, transmission, airlight, rng) -> np.ndarray:
    """Invert the haze model with perturbed parameters, then add noise."""
    t = np.asarray(transmission)[:, :, None] * rng.uniform(0.9, 1.1)
    a = np.asarray(airlight) * rng.uniform(0.97, 1.03)
    est = (degraded - a * (1.0 - t)) / t
    return np.clip(est + rng.normal(0.0, 0.04, size=degraded.shape), 0.0, 1.0)


@dataclass
class ToyFixture:
    labeled: list
    unlabeled: UnlabeledSet
    heldout: list
    clean: dict
    candidates: dict
    references: dict
    scenes: dict = field(default_factory=dict)

    def registry(self, *, rewriter_mode: str = "lexicon") -> BackendRegistry:
        return toy_registry(self.clean, self.scenes, rewriter_mode=rewriter_mode)


def mock_raters(clean: dict) -> list:
    """Two oracle judges with different residual metrics and sharpness."""
    return [
        MockOracleRater("oracle-mae", clean, metric="mae", scale=10.0, saturation=0.3),
        MockOracleRater("oracle-rmse", clean, metric="rmse", scale=8.0, saturation=0.35),
    ]


def toy_registry(clean: dict, scenes: dict | None = None, *,
                 rewriter_mode: str = "lexicon") -> BackendRegistry:
    return BackendRegistry([
        *mock_raters(clean),
        MockCaptioner(scenes=scenes),
        MockRewriter(mode=rewriter_mode),
        PixelStatEncoder(),
        PooledRGBExtractor(),
    ])


def make_toy_fixture(seed: int = 0, *, n_labeled: int = 40, n_unlabeled: int = 40,
                     n_heldout: int = 20, n_references: int = 8, size: int = 64) -> ToyFixture:
    scene_rng, lab_rng, unl_rng, held_rng, ref_rng, cand_rng = spawn_rngs(seed, 6)
    clean, scenes = {}, {}

    def scene(image_id, rng):
        clean[image_id] = render_scene(rng, size)
        scenes[image_id] = DEFAULT_SCENES[int(scene_rng.integers(len(DEFAULT_SCENES)))]
        return clean[image_id]

    labeled = []
    for k in range(n_labeled):
        j = scene(f"syn{k:03d}", lab_rng)
        t, a = synthetic_haze_params(lab_rng, size)
        labeled.append(LabeledPair(
            ImageSample(f"syn{k:03d}", apply_haze(j, t, a), Weather.HAZE, Source.SYNTHETIC),
            ImageSample(f"syn{k:03d}-gt", j, Weather.CLEAR, Source.SYNTHETIC)))

    unlabeled, candidates = [], {}
    for k in range(n_unlabeled):
        image_id = f"real{k:03d}"
        j = scene(image_id, unl_rng)
        t, a = real_haze_params(unl_rng, size)
        hazy = apply_haze(j, t, a)
        unlabeled.append(ImageSample(image_id, hazy, Weather.HAZE, Source.REAL))
        candidates[image_id] = CandidateSet(image_id, (
            ("identity", hazy),
            ("gaussian", smooth_restorer(hazy)),
            ("noisy-inverse", noisy_inverse_restorer(hazy, t, a, cand_rng)),
        ))

    heldout = []
    for k in range(n_heldout):
        image_id = f"test{k:03d}"
        j = scene(image_id, held_rng)
        t, a = real_haze_params(held_rng, size)
        heldout.append(ImageSample(image_id, apply_haze(j, t, a), Weather.HAZE, Source.REAL))

    references = {w: [] for w in Weather}
    for k in range(n_references):
        base = render_scene(ref_rng, size)
        t, a = real_haze_params(ref_rng, size)
        references[Weather.CLEAR].append(ImageSample(f"ref-clear{k}", base, Weather.CLEAR))
        references[Weather.HAZE].append(
            ImageSample(f"ref-haze{k}", apply_haze(base, t, a), Weather.HAZE))
        references[Weather.RAIN].append(
            ImageSample(f"ref-rain{k}", apply_rain(base, ref_rng), Weather.RAIN))
        references[Weather.SNOW].append(
            ImageSample(f"ref-snow{k}", apply_snow(base, ref_rng), Weather.SNOW))

    return ToyFixture(labeled, UnlabeledSet(tuple(unlabeled)), heldout, clean, candidates,
                      references, scenes)


def desk_config(**overrides) -> TrainConfig:
    """Settings for the 2-round × 500-iteration desk-scale experiment."""
    base = TrainConfig(iterations_per_round=500, rounds=2, ema_decay=0.99, learning_rate=1e-3)
    return base.replace(**overrides)


def toy_experts_spec() -> dict:
    """Experts file matching :func:`toy_registry` for a tree from :func:`write_toy_tree`."""
    return {
        "rating": [
            {"backend": "mock-oracle", "name": "oracle-mae", "references": "clean",
             "metric": "mae", "scale": 10.0, "saturation": 0.3},
            {"backend": "mock-oracle", "name": "oracle-rmse", "references": "clean",
             "metric": "rmse", "scale": 8.0, "saturation": 0.35},
        ],
        "caption": {"backend": "mock", "scenes": "scenes.json"},
        "rewrite": {"backend": "mock", "mode": "lexicon"},
        "embed": {"backend": "mock-clip"},
        "feature": {"backend": "mock-pool", "patch": 8},
    }


def write_toy_tree(root, seed: int = 0, *, n_weather_tests: int = 6) -> ToyFixture:
    """Write the toy fixture as directories the command-line tools read.

    Layout (ids carry the weather subdirectory, e.g. ``haze/real000``)::

        labeled/{degraded,clean}/haze/   unlabeled/haze/   candidates/<method>/haze/
        references/<weather>/            test/{haze,rain,snow}/
        clean/                           oracle references for every scored id
        experts.json  scenes.json  desk.cfg

    The rain and snow test images reuse the first held-out scenes.
    """
    import json
    from pathlib import Path

    from .core import dump_config
    from .imagedir import write_image_tree

    root = Path(root)
    fx = make_toy_fixture(seed)
    rng = spawn_rngs(seed, 7)[6]
    haze = lambda i: f"haze/{i}"  # noqa: E731
    write_image_tree(root / "labeled/degraded", {haze(p.degraded.id): p.degraded.pixels
                                                 for p in fx.labeled})
    write_image_tree(root / "labeled/clean", {haze(p.degraded.id): p.clean.pixels
                                              for p in fx.labeled})
    write_image_tree(root / "unlabeled", {haze(s.id): s.pixels for s in fx.unlabeled})
    methods: dict = {}
    for cset in fx.candidates.values():
        for method, pixels in cset.candidates:
            methods.setdefault(method, {})[haze(cset.image_id)] = pixels
    for method, images in methods.items():
        write_image_tree(root / "candidates" / method, images)
    write_image_tree(root / "references", {f"{w.value}/{s.id}": s.pixels
                                           for w, samples in fx.references.items()
                                           for s in samples})
    test = {haze(s.id): s.pixels for s in fx.heldout}
    clean = {haze(i): fx.clean[i] for i in [s.id for s in fx.unlabeled] +
             [s.id for s in fx.heldout]}
    for s in fx.heldout[:n_weather_tests]:
        j = fx.clean[s.id]
        test[f"rain/{s.id}"] = apply_rain(j, rng)
        test[f"snow/{s.id}"] = apply_snow(j, rng)
        clean[f"rain/{s.id}"] = clean[f"snow/{s.id}"] = j
    write_image_tree(root / "test", test)
    write_image_tree(root / "clean", clean)
    scenes = {f"{prefix}/{i}": list(v) for i, v in sorted(fx.scenes.items())
              for prefix in ("haze", "rain", "snow")}
    (root / "scenes.json").write_text(json.dumps(scenes, sort_keys=True, indent=1) + "\n")
    (root / "experts.json").write_text(json.dumps(toy_experts_spec(), indent=2) + "\n")
    (root / "desk.cfg").write_text(dump_config(desk_config(seed=seed)))
    return fx
