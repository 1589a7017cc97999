"""Backend value types, base classes and the expert registry."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from ..core import ImageSample
from ..errors import ConfigurationError, DomainError

# Token order defines the rating: index i (1-based) is rating i.
RATING_WORDS = ("bad", "poor", "fair", "good", "excellent")

DEFAULT_RATING_QUESTION = (
    "Considering only visibility and weather-related artifacts such as rain, haze and snow, "
    "how would you rate this image? Answer with one word: excellent, good, fair, poor, or bad."
)


class ExpertKind(str, enum.Enum):
    RATING = "rating"
    CAPTION = "caption"
    REWRITE = "rewrite"
    EMBED = "embed"
    FEATURE = "feature"


@dataclass(frozen=True)
class ExpertId:
    name: str
    kind: ExpertKind

    def __str__(self):
        return f"{self.kind.value}:{self.name}"


@dataclass(frozen=True)
class RatingLogits:
    logits: tuple[float, float, float, float, float]

    def __post_init__(self):
        values = tuple(float(v) for v in self.logits)
        if len(values) != 5:
            raise DomainError(f"expected 5 rating logits, got {len(values)}")
        if not all(math.isfinite(v) for v in values):
            raise DomainError("rating logits must be finite")
        object.__setattr__(self, "logits", values)


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if self.normalized and abs(np.linalg.norm(values) - 1.0) > 1e-6:
            raise DomainError("normalized embedding must have unit norm")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class FeatureMap:
    grid: np.ndarray  # H × W × d_f

    def __post_init__(self):
        grid = np.array(self.grid, dtype=np.float64)
        if grid.ndim != 3 or grid.shape[0] < 1 or grid.shape[1] < 1:
            raise DomainError(f"feature grid must be H×W×d, got {grid.shape}")
        if not np.all(np.isfinite(grid)):
            raise DomainError("feature vectors must be finite")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)


class Backend:
    """Common surface: a name, a kind and a concurrency hint."""

    kind: ExpertKind
    name: str
    max_in_flight: int = 1

    @property
    def expert_id(self) -> ExpertId:
        return ExpertId(self.name, self.kind)


class RatingBackend(Backend):
    kind = ExpertKind.RATING

    def rate_image(self, image: ImageSample, template: str) -> RatingLogits:
        raise NotImplementedError


class CaptionBackend(Backend):
    kind = ExpertKind.CAPTION

    def caption_image(self, image: ImageSample) -> str:
        raise NotImplementedError


class RewriteBackend(Backend):
    kind = ExpertKind.REWRITE

    def rewrite_description(self, negative: str, icl_examples) -> str:
        raise NotImplementedError


class EmbeddingBackend(Backend):
    """Joint image-text encoder.

    ``embed_image`` / ``embed_text`` return detached unit vectors.
    ``encode_pixels`` / ``encode_prompts`` are the differentiable torch paths
    used during training; prompt context vectors go straight into the text
    tower without tokenization.
    """

    kind = ExpertKind.EMBED
    image_dim: int
    text_dim: int
    prompt_width: int

    def embed_image(self, image: ImageSample) -> EmbeddingVector:
        raise NotImplementedError

    def embed_text(self, text) -> EmbeddingVector:
        raise NotImplementedError

    def encode_pixels(self, pixels):
        raise NotImplementedError

    def encode_prompts(self, context):
        raise NotImplementedError

    def encode_texts(self, texts):
        raise NotImplementedError

    def parameter_digest(self) -> str:
        raise NotImplementedError


class FeatureBackend(Backend):
    kind = ExpertKind.FEATURE

    def extract_features(self, image: ImageSample) -> FeatureMap:
        raise NotImplementedError

    def features(self, pixels):
        raise NotImplementedError


def check_template(template: str) -> None:
    if "{question}" not in template:
        raise DomainError("rating template must contain the {question} placeholder")


class BackendRegistry:
    """Registered experts, kept in registration order per kind."""

    def __init__(self, backends=()):
        self._by_kind: dict[ExpertKind, dict[str, Backend]] = {k: {} for k in ExpertKind}
        for backend in backends:
            self.register(backend)

    def register(self, backend: Backend) -> Backend:
        kind = ExpertKind(backend.kind)
        if backend.name in self._by_kind[kind]:
            raise ConfigurationError(f"duplicate expert {kind.value}:{backend.name}")
        if kind is ExpertKind.EMBED and backend.image_dim != backend.text_dim:
            raise ConfigurationError(
                f"encoder {backend.name}: image tower dim {backend.image_dim} "
                f"!= text tower dim {backend.text_dim}")
        self._by_kind[kind][backend.name] = backend
        return backend

    def all(self, kind) -> list:
        return list(self._by_kind[ExpertKind(kind)].values())

    def get(self, kind, name: str | None = None):
        members = self._by_kind[ExpertKind(kind)]
        if not members:
            raise ConfigurationError(f"no {ExpertKind(kind).value} backend registered")
        if name is None:
            return next(iter(members.values()))
        try:
            return members[name]
        except KeyError:
            raise ConfigurationError(f"unknown {ExpertKind(kind).value} backend {name!r}") from None

    @property
    def raters(self) -> list:
        return self.all(ExpertKind.RATING)
