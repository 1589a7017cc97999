"""Deterministic mock backends.

Every mock is a pure function of its inputs and fixture seed. They stand in
for hosted VLMs, LLMs and pretrained encoders in tests and desk-scale runs.
"""

from __future__ import annotations

import hashlib
import json
import re
import zlib
from importlib import resources

import numpy as np
import torch
import torch.nn.functional as F

from ..core import ImageSample, Weather, seeded_rng
from ..errors import ConfigurationError, DomainError, ProtocolError
from .base import (CaptionBackend, EmbeddingBackend, EmbeddingVector, FeatureBackend,
                   FeatureMap, RatingBackend, RatingLogits, RewriteBackend, check_template)


def load_fixture(name: str):
    text = resources.files("stormlab.data").joinpath(name).read_text(encoding="utf-8")
    return json.loads(text) if name.endswith(".json") else text


# -- rating ------------------------------------------------------------------

# Anchor of rating i (1-based) on the artifact-energy axis; excellent sits at 0.
RATING_ANCHORS = np.array([1.0, 0.75, 0.5, 0.25, 0.0])


def oracle_logits(energy: float, scale: float) -> np.ndarray:
    return scale * (1.0 - np.abs(energy - RATING_ANCHORS))


class MockOracleRater(RatingBackend):
    """Judge that knows the clean image behind every id it is asked about.

    Artifact energy is the residual to the clean reference (mean absolute or
    root-mean-square), divided by ``saturation`` and clipped to [0, 1].
    """

    def __init__(self, name: str, references: dict, *, metric: str = "mae",
                 scale: float = 10.0, saturation: float = 0.3):
        if metric not in ("mae", "rmse"):
            raise ConfigurationError(f"unknown oracle metric {metric!r}")
        self.name = name
        self.metric = metric
        self.scale = float(scale)
        self.saturation = float(saturation)
        self._refs = {k: np.asarray(v, dtype=np.float64) for k, v in references.items()}

    def energy(self, image: ImageSample) -> float:
        ref = self._refs.get(image.id)
        if ref is None:
            raise ProtocolError(f"{self.name}: no rating tokens for unknown image {image.id!r}",
                                raw_response="")
        if ref.shape != image.pixels.shape:
            raise ProtocolError(f"{self.name}: reference shape mismatch for {image.id!r}")
        diff = image.pixels - ref
        err = np.abs(diff).mean() if self.metric == "mae" else np.sqrt(np.mean(diff * diff))
        return float(min(1.0, err / self.saturation))

    def rate_image(self, image: ImageSample, template: str) -> RatingLogits:
        check_template(template)
        return RatingLogits(tuple(oracle_logits(self.energy(image), self.scale)))


# -- text --------------------------------------------------------------------

_WEATHER_PHRASES = {
    Weather.RAIN: "heavy rain",
    Weather.HAZE: "thick haze",
    Weather.SNOW: "falling snow",
}

DEFAULT_SCENES = (
    ("a person walking", "street"),
    ("a parked car", "road"),
    ("a tall tree", "park"),
    ("a small boat", "harbor"),
    ("a red bicycle", "sidewalk"),
    ("a brown dog", "field"),
)


class MockCaptioner(CaptionBackend):
    """Template captions from a scene table and the image's weather tag.

    Untagged images (restorations) are described as clear.
    """

    def __init__(self, name: str = "mock-caption", scenes: dict | None = None):
        self.name = name
        self._scenes = dict(scenes or {})

    def scene(self, image_id: str) -> tuple[str, str]:
        if image_id in self._scenes:
            return tuple(self._scenes[image_id])
        return DEFAULT_SCENES[zlib.crc32(image_id.encode()) % len(DEFAULT_SCENES)]

    def caption_image(self, image: ImageSample) -> str:
        subject, place = self.scene(image.id)
        tag = image.weather_tag or Weather.CLEAR
        if tag is Weather.CLEAR:
            return f"{subject} on the {place} on a sunny day"
        return f"{subject} in {_WEATHER_PHRASES[tag]} on the {place}"


class MockRewriter(RewriteBackend):
    """Lexicon substitution rewriter.

    Modes: ``lexicon`` (weather phrase -> clear phrase, or a clear prefix when
    no weather term is present), ``echo`` (returns the input) and ``drift``
    (returns an unrelated clear sentence).
    """

    DRIFT_TEXT = "a cloudless sky over an empty meadow"

    def __init__(self, name: str = "mock-rewrite", mode: str = "lexicon"):
        if mode not in ("lexicon", "echo", "drift"):
            raise ConfigurationError(f"unknown rewriter mode {mode!r}")
        self.name = name
        self.mode = mode
        rules = load_fixture("rewrite_rules.json")
        modifiers = "|".join(map(re.escape, rules["modifiers"]))
        terms = "|".join(map(re.escape, sorted(rules["weather_terms"], key=len, reverse=True)))
        self._pattern = re.compile(rf"\b(?:(?:{modifiers})\s+)*(?:{terms})\b", re.IGNORECASE)
        self._replacement = rules["replacement"]
        self._prefix = rules["prefix"]

    def rewrite_description(self, negative: str, icl_examples=()) -> str:
        if not negative.strip():
            raise DomainError("negative description must be nonempty")
        if self.mode == "echo":
            return negative
        if self.mode == "drift":
            return self.DRIFT_TEXT
        rewritten, n = self._pattern.subn(self._replacement, negative)
        return rewritten if n else self._prefix + negative


# -- joint encoders ------------------------------------------------------------

def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z]+", text.lower())


class MockJointEncoder(EmbeddingBackend):
    """Shared text tower for the mock encoders.

    The first four embedding axes are the clear/rain/haze/snow basis from the
    ``weather_words.json`` fixture. Weather words map onto their basis axis,
    every other word onto a hashed direction in the remaining content axes.
    Learnable prompt contexts are averaged and sent through a fixed linear
    projection.
    """

    content_scale = 0.6

    def __init__(self, name: str, dim: int = 16, prompt_width: int = 32, seed: int = 0):
        table = load_fixture("weather_words.json")
        self.basis_order = tuple(Weather(w) for w in table["basis_order"])
        if dim <= len(self.basis_order):
            raise ConfigurationError("embedding dim must exceed the number of weather classes")
        self.name = name
        self.dim = self.image_dim = self.text_dim = dim
        self.prompt_width = prompt_width
        self.seed = seed
        self._word_axis = {w: i for i, cls in enumerate(table["basis_order"])
                           for w in table["words"][cls]}
        rng = seeded_rng(seed)
        self._projection = rng.normal(size=(dim, prompt_width)) / np.sqrt(prompt_width)
        self._projection.setflags(write=False)
        self._projection_t = torch.tensor(np.array(self._projection))
        self._word_cache: dict[str, np.ndarray] = {}

    def basis(self, tag) -> np.ndarray:
        v = np.zeros(self.dim)
        v[self.basis_order.index(Weather(tag))] = 1.0
        return v

    def word_vector(self, word: str) -> np.ndarray:
        vec = self._word_cache.get(word)
        if vec is None:
            if word in self._word_axis:
                vec = np.zeros(self.dim)
                vec[self._word_axis[word]] = 1.0
            else:
                digest = hashlib.sha256(f"{self.seed}:{word}".encode()).digest()
                rng = seeded_rng(int.from_bytes(digest[:8], "little"))
                vec = np.zeros(self.dim)
                content = rng.normal(size=self.dim - 4)
                vec[4:] = self.content_scale * content / np.linalg.norm(content)
            self._word_cache[word] = vec
        return vec

    def _text_vector(self, text: str) -> np.ndarray:
        words = tokenize(text)
        if not words:
            raise DomainError("cannot embed empty text")
        v = np.sum([self.word_vector(w) for w in words], axis=0)
        return v / np.linalg.norm(v)

    def encode_texts(self, texts) -> torch.Tensor:
        return torch.from_numpy(np.stack([self._text_vector(t) for t in texts]))

    def encode_prompts(self, context: torch.Tensor) -> torch.Tensor:
        proj = self._projection_t.to(context.dtype)
        return F.normalize(context.mean(dim=-2) @ proj.T, dim=-1)

    def embed_text(self, text) -> EmbeddingVector:
        if isinstance(text, str):
            return EmbeddingVector(self._text_vector(text))
        with torch.no_grad():
            ctx = torch.as_tensor(text, dtype=torch.float64)
            return EmbeddingVector(self.encode_prompts(ctx).numpy())

    def _digest_parts(self) -> list[bytes]:
        return [self._projection.tobytes(), json.dumps(sorted(self._word_axis.items())).encode()]

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for part in self._digest_parts():
            h.update(part)
        return h.hexdigest()


class TagBasisEncoder(MockJointEncoder):
    """Image tower returns the basis vector of the image's weather tag."""

    def embed_image(self, image: ImageSample) -> EmbeddingVector:
        if image.weather_tag is None:
            raise DomainError(f"image {image.id} has no weather tag")
        return EmbeddingVector(self.basis(image.weather_tag))

    def encode_pixels(self, pixels):
        raise ConfigurationError(f"{self.name} has no pixel tower")


class PixelStatEncoder(MockJointEncoder):
    """Differentiable image tower built from weather-evidence statistics.

    The clear axis carries a constant bias; haze evidence is the mean dark
    channel, rain evidence the excess of horizontal over vertical gradient
    energy (vertical streaks), snow evidence the fraction of near-white
    pixels. Mean colour fills the content axes.
    """

    clear_bias = 0.6
    haze_gain = 1.5
    rain_gain = 8.0
    snow_gain = 4.0
    colour_gain = 0.3

    def __init__(self, name: str = "mock-clip", dim: int = 16, prompt_width: int = 32,
                 seed: int = 0):
        super().__init__(name, dim, prompt_width, seed)
        colour = seeded_rng(seed + 1).normal(size=(dim - 4, 3))
        self._colour = colour / np.linalg.norm(colour, axis=0, keepdims=True)
        self._colour.setflags(write=False)
        self._colour_t = torch.tensor(np.array(self._colour))

    def encode_pixels(self, pixels: torch.Tensor) -> torch.Tensor:
        x = pixels
        dark = x.min(dim=1).values
        haze = dark.mean(dim=(1, 2))
        dx = (x[..., :, 1:] - x[..., :, :-1]).abs().mean(dim=(1, 2, 3))
        dy = (x[..., 1:, :] - x[..., :-1, :]).abs().mean(dim=(1, 2, 3))
        rain = F.relu(dx - dy)
        snow = torch.sigmoid((dark - 0.92) * 40.0).mean(dim=(1, 2))
        colour = (x.mean(dim=(2, 3)) - 0.5) @ self._colour_t.to(x.dtype).T
        weather = torch.stack([
            torch.full_like(haze, self.clear_bias),
            self.rain_gain * rain,
            self.haze_gain * haze,
            self.snow_gain * snow,
        ], dim=1)
        return F.normalize(torch.cat([weather, self.colour_gain * colour], dim=1), dim=-1)

    def embed_image(self, image: ImageSample) -> EmbeddingVector:
        x = torch.from_numpy(np.ascontiguousarray(image.pixels.transpose(2, 0, 1)))[None]
        with torch.no_grad():
            return EmbeddingVector(self.encode_pixels(x)[0].numpy())

    def _digest_parts(self) -> list[bytes]:
        return super()._digest_parts() + [self._colour.tobytes()]


# -- dense features ------------------------------------------------------------

class PooledRGBExtractor(FeatureBackend):
    """Average-pooled RGB patches: feature dim 3, grid ⌈h/patch⌉ × ⌈w/patch⌉."""

    def __init__(self, name: str = "mock-pool", patch: int = 8):
        self.name = name
        self.patch = patch

    def features(self, pixels: torch.Tensor) -> torch.Tensor:
        return F.avg_pool2d(pixels, self.patch, ceil_mode=True)

    def extract_features(self, image: ImageSample) -> FeatureMap:
        x = torch.from_numpy(np.ascontiguousarray(image.pixels.transpose(2, 0, 1)))[None]
        return FeatureMap(self.features(x)[0].numpy().transpose(1, 2, 0))
