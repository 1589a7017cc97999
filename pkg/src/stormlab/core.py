"""Domain types, configuration and deterministic utilities."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError, ValidationError

MIN_SIDE = 8
SEED_ENV = "STORMLAB_SEED"


class Weather(str, enum.Enum):
    CLEAR = "clear"
    RAIN = "rain"
    HAZE = "haze"
    SNOW = "snow"


class Source(str, enum.Enum):
    SYNTHETIC = "synthetic"
    REAL = "real"


def as_pixels(pixels) -> np.ndarray:
    """Convert an image array to a read-only float64 H×W×3 grid in [0, 1].

    Integer arrays are scaled by the maximum of their dtype (8 or 16 bit).
    """
    arr = np.asarray(pixels)
    if arr.dtype == np.uint8 or arr.dtype == np.uint16:
        arr = arr.astype(np.float64) / np.iinfo(arr.dtype).max
    else:
        arr = np.array(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DomainError(f"expected an H×W×3 image, got shape {arr.shape}")
    if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
        raise DomainError(f"image must be at least {MIN_SIDE}×{MIN_SIDE}, got {arr.shape[:2]}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise DomainError("pixel values must be finite and lie in [0, 1]")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageSample:
    id: str
    pixels: np.ndarray
    weather_tag: Weather | None = None
    source: Source = Source.REAL

    def __post_init__(self):
        object.__setattr__(self, "pixels", as_pixels(self.pixels))
        if self.weather_tag is not None:
            object.__setattr__(self, "weather_tag", Weather(self.weather_tag))
        object.__setattr__(self, "source", Source(self.source))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    def with_pixels(self, pixels) -> "ImageSample":
        """Same identity, new content (used for restorations of this image)."""
        return ImageSample(self.id, pixels, None, self.source)


@dataclass(frozen=True, eq=False)
class LabeledPair:
    degraded: ImageSample
    clean: ImageSample

    def __post_init__(self):
        if self.degraded.shape != self.clean.shape:
            raise DomainError(f"pair {self.degraded.id}: degraded and clean shapes differ")
        if self.degraded.source is not Source.SYNTHETIC:
            raise DomainError(f"pair {self.degraded.id}: degraded image must be synthetic")


@dataclass(frozen=True, eq=False)
class UnlabeledSet:
    items: tuple[ImageSample, ...]

    def __post_init__(self):
        items = tuple(self.items)
        object.__setattr__(self, "items", items)
        ids = [s.id for s in items]
        if len(set(ids)) != len(ids):
            raise DomainError("unlabeled image ids must be unique")
        for s in items:
            if s.source is not Source.REAL:
                raise DomainError(f"unlabeled image {s.id} must have source=real")

    @property
    def count(self) -> int:
        return len(self.items)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def by_id(self) -> dict[str, ImageSample]:
        return {s.id: s for s in self.items}


@dataclass(frozen=True)
class LossWeights:
    w1: float = 0.5
    w2: float = 0.2
    w3: float = 0.05
    w4: float = 0.2

    def __post_init__(self):
        for name in ("w1", "w2", "w3", "w4"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValidationError("loss weights must be finite and non-negative", key=name)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.w1, self.w2, self.w3, self.w4)


DEFAULT_RATING_TEMPLATE = (
    "USER: <image>\n{question}\nASSISTANT: The visibility of the image is"
)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``assessment_interval=None`` disables online pseudo-label updates.
    ``init_pseudo_labels``, ``vlm_updates`` and ``boundary_updates`` switch
    off candidate initialization, judge-gated label replacement (falling back
    to a plain mean teacher) and the round-boundary refresh, respectively.
    """

    loss_weights: LossWeights = field(default_factory=LossWeights)
    ema_decay: float = 0.999
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    iterations_per_round: int = 40_000
    rounds: int = 4
    assessment_interval: int | None = 1
    temperature: float = 1.0
    seed: int = 0
    learning_rate: float = 2e-4
    checkpoint_interval: int = 1000
    n_ctx: int = 8
    prompt_epochs: int = 50
    prompt_lr: float = 0.002
    init_pseudo_labels: bool = True
    vlm_updates: bool = True
    boundary_updates: bool = True
    rating_template: str = DEFAULT_RATING_TEMPLATE

    def __post_init__(self):
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValidationError("must lie in [0, 1)", key="ema_decay")
        for key in ("batch_labeled", "batch_unlabeled", "rounds", "checkpoint_interval", "n_ctx"):
            if getattr(self, key) < 1:
                raise ValidationError("must be >= 1", key=key)
        for key in ("iterations_per_round", "prompt_epochs"):
            if getattr(self, key) < 0:
                raise ValidationError("must be >= 0", key=key)
        if self.assessment_interval is not None and self.assessment_interval < 1:
            raise ValidationError("must be >= 1 or 'never'", key="assessment_interval")
        for key in ("temperature", "learning_rate", "prompt_lr"):
            value = getattr(self, key)
            if not (math.isfinite(value) and value > 0):
                raise ValidationError("must be a positive real", key=key)
        if "{question}" not in self.rating_template:
            raise ValidationError("must contain the {question} placeholder", key="rating_template")

    def replace(self, **changes) -> "TrainConfig":
        weights = {k: changes.pop(k) for k in ("w1", "w2", "w3", "w4") if k in changes}
        if weights:
            changes["loss_weights"] = dataclasses.replace(
                changes.get("loss_weights", self.loss_weights), **weights)
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()[:16]


# -- config file -------------------------------------------------------------

_WEIGHT_KEYS = ("w1", "w2", "w3", "w4")


def _config_fields() -> dict[str, type]:
    types = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name == "loss_weights":
            types.update({k: float for k in _WEIGHT_KEYS})
        else:
            types[f.name] = {"int": int, "float": float, "bool": bool, "str": str,
                             "int | None": int}[f.type]
    return types


def _parse_value(key: str, raw: str, kind: type):
    if kind is str:
        if raw.startswith('"'):
            try:
                value = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"bad string literal ({exc.msg})", key=key) from None
            if not isinstance(value, str):
                raise ConfigError("expected a string", key=key)
            return value
        return raw
    if kind is bool:
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(f"expected true/false, got {raw!r}", key=key)
    if key == "assessment_interval" and raw.lower() in ("never", "none", "inf"):
        return None
    try:
        return int(raw) if kind is int else float(raw)
    except ValueError:
        raise ConfigError(f"expected {kind.__name__}, got {raw!r}", key=key) from None


def parse_config(text: str, *, apply_env: bool = True) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment on unquoted lines."""
    fields = _config_fields()
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in fields:
            raise ConfigError("unknown key", key=key)
        if key in values:
            raise ConfigError("duplicate key", key=key)
        if not raw.startswith('"') and "#" in raw:
            raw = raw.split("#", 1)[0].strip()
        values[key] = _parse_value(key, raw, fields[key])
    if apply_env and os.environ.get(SEED_ENV):
        values["seed"] = _parse_value(SEED_ENV, os.environ[SEED_ENV].strip(), int)
    weights = {k: values.pop(k) for k in _WEIGHT_KEYS if k in values}
    return TrainConfig(loss_weights=LossWeights(**weights), **values)


def load_config(path) -> TrainConfig:
    """Read a config file; missing keys take their defaults.

    The ``STORMLAB_SEED`` environment variable overrides ``seed``.
    """
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(config: TrainConfig) -> str:
    lines = []
    for key in _config_fields():
        if key in _WEIGHT_KEYS:
            value = getattr(config.loss_weights, key)
        else:
            value = getattr(config, key)
        if value is None:
            text = "never"
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, str):
            text = json.dumps(value)
        else:
            text = repr(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def save_config(config: TrainConfig, path) -> None:
    atomic_write_text(path, dump_config(config))


# -- determinism -------------------------------------------------------------

def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical across platforms for a given seed."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child streams, so consumers never share randomness."""
    return [np.random.Generator(np.random.PCG64(s))
            for s in np.random.SeedSequence(seed).spawn(n)]


def content_hash(pixels: np.ndarray) -> str:
    arr = np.ascontiguousarray(pixels, dtype=np.float64)
    h = hashlib.sha256(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


# -- files -------------------------------------------------------------------

def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_jsonl(path, records: Sequence[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".bmp", ".ppm", ".pgm")


def read_image(path) -> np.ndarray:
    """Read a lossless 8- or 16-bit raster as float64 RGB in [0, 1]."""
    import cv2

    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DomainError(f"cannot read image {path}")
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    elif raw.shape[2] == 4:
        raw = raw[:, :, :3]
    if raw.dtype not in (np.uint8, np.uint16):
        raise DomainError(f"{path}: unsupported sample type {raw.dtype}")
    return as_pixels(raw[:, :, ::-1])


def quantize16(pixels) -> np.ndarray:
    """Snap pixels to the 16-bit grid so PNG storage is exact."""
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    return np.round(arr * 65535.0) / 65535.0


def write_png16(path, pixels) -> None:
    import cv2

    arr = np.round(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0) * 65535.0)
    ok, buf = cv2.imencode(".png", arr.astype(np.uint16)[:, :, ::-1],
                           [cv2.IMWRITE_PNG_COMPRESSION, 6])
    if not ok:
        raise DomainError(f"could not encode {path}")
    atomic_write_bytes(path, buf.tobytes())


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
