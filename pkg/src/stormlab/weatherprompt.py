"""Learnable weather prompts and the clear-weather prompt loss."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import Weather, atomic_write_text
from .errors import ConfigurationError, DomainError, LoadError, TrainingError

CLASSES = (Weather.CLEAR, Weather.RAIN, Weather.HAZE, Weather.SNOW)
CLEAR_INDEX = 0
INIT_STD = 0.02


@dataclass(frozen=True, eq=False)
class WeatherPrompts:
    """Class-specific context vectors, shape (4, n_ctx, width), class order CLASSES."""

    context: torch.Tensor

    def __post_init__(self):
        ctx = torch.as_tensor(self.context).detach().clone()
        if ctx.ndim != 3 or ctx.shape[0] != len(CLASSES):
            raise DomainError(f"prompt context must be (4, n_ctx, width), got {tuple(ctx.shape)}")
        if not torch.isfinite(ctx).all():
            raise DomainError("prompt vectors must be finite")
        object.__setattr__(self, "context", ctx)

    @property
    def n_ctx(self) -> int:
        return self.context.shape[1]

    @property
    def width(self) -> int:
        return self.context.shape[2]

    def embeddings(self) -> dict:
        return {c: self.context[k].numpy() for k, c in enumerate(CLASSES)}

    def equals(self, other: "WeatherPrompts") -> bool:
        return torch.equal(self.context, other.context)


def init_prompts(n_ctx: int, width: int, rng: np.random.Generator, encoder=None) -> WeatherPrompts:
    """Draw every context entry i.i.d. from N(0, 0.02²)."""
    if n_ctx < 1 or width < 1:
        raise DomainError("n_ctx and width must be >= 1")
    if encoder is not None and encoder.prompt_width != width:
        raise ConfigurationError(
            f"prompt width {width} does not match encoder {encoder.name} ({encoder.prompt_width})")
    values = rng.normal(0.0, INIT_STD, size=(len(CLASSES), n_ctx, width))
    return WeatherPrompts(torch.from_numpy(values).to(torch.float32))


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")


def weather_logits(image_emb: torch.Tensor, prompt_emb: torch.Tensor,
                   temperature: float) -> torch.Tensor:
    """Cosine similarity to each class prompt, divided by the temperature."""
    _check_temperature(temperature)
    cos = F.normalize(image_emb, dim=-1) @ F.normalize(prompt_emb, dim=-1).T
    return cos / temperature


def classify(image_embedding, prompts: WeatherPrompts, encoder, temperature: float = 1.0):
    """Class probabilities in CLASSES order for one or more image embeddings."""
    emb = torch.tensor(np.array(getattr(image_embedding, "values", image_embedding)),
                       dtype=torch.float64)
    with torch.no_grad():
        prompt_emb = encoder.encode_prompts(prompts.context.to(torch.float64))
        probs = torch.softmax(weather_logits(emb, prompt_emb, temperature), dim=-1)
    return probs.numpy()


def wpl_loss(image_emb: torch.Tensor, prompt_emb: torch.Tensor,
             temperature: float = 1.0) -> torch.Tensor:
    """Negative log-probability of the clear class, averaged over the batch.

    ``prompt_emb`` holds the four encoded prompts (4 × d) in CLASSES order.
    """
    logits = weather_logits(image_emb, prompt_emb, temperature)
    return -torch.log_softmax(logits, dim=-1)[..., CLEAR_INDEX].mean()


def train_prompts(prompts: WeatherPrompts, reference_images: dict, encoder, *,
                  epochs: int = 50, lr: float = 0.002, temperature: float = 1.0,
                  history: list | None = None) -> WeatherPrompts:
    """Fit the prompt context by full-batch gradient descent on cross-entropy.

    Only the prompt vectors are optimized; the encoder is used read-only.
    ``history`` (if given) receives the mean loss before each epoch and after
    the last one.
    """
    missing = [c.value for c in CLASSES if not reference_images.get(c) and
               not reference_images.get(c.value)]
    if missing:
        raise TrainingError(f"no reference images for class(es): {', '.join(missing)}")
    if encoder.prompt_width != prompts.width:
        raise ConfigurationError("prompt width does not match the encoder")
    embs, targets = [], []
    for k, cls in enumerate(CLASSES):
        images = reference_images.get(cls) or reference_images.get(cls.value)
        for img in images:
            embs.append(encoder.embed_image(img).values)
            targets.append(k)
    emb = torch.from_numpy(np.stack(embs))
    target = torch.tensor(targets)
    ctx = prompts.context.to(torch.float64).clone().requires_grad_(True)

    def loss_fn():
        logits = weather_logits(emb, encoder.encode_prompts(ctx), temperature)
        return F.cross_entropy(logits, target)

    for _ in range(epochs):
        loss = loss_fn()
        if history is not None:
            history.append(float(loss.detach()))
        (grad,) = torch.autograd.grad(loss, ctx)
        with torch.no_grad():
            ctx -= lr * grad
    if history is not None:
        with torch.no_grad():
            history.append(float(loss_fn()))
    return WeatherPrompts(ctx.detach().to(prompts.context.dtype))


def reference_accuracy(prompts: WeatherPrompts, reference_images: dict, encoder,
                       temperature: float = 1.0) -> float:
    hits = total = 0
    for k, cls in enumerate(CLASSES):
        for img in reference_images.get(cls) or reference_images.get(cls.value, ()):
            probs = classify(encoder.embed_image(img), prompts, encoder, temperature)
            hits += int(np.argmax(probs) == k)
            total += 1
    return hits / total


def prompts_to_json(prompts: WeatherPrompts) -> str:
    ctx = prompts.context.to(torch.float64).numpy()
    payload = {
        "n_ctx": prompts.n_ctx,
        "width": prompts.width,
        "dtype": str(prompts.context.dtype).replace("torch.", ""),
        "classes": {c.value: [float(v) for v in ctx[k].reshape(-1)]
                    for k, c in enumerate(CLASSES)},
    }
    return json.dumps(payload, sort_keys=True)


def prompts_from_json(text: str) -> WeatherPrompts:
    try:
        payload = json.loads(text)
        n_ctx, width = int(payload["n_ctx"]), int(payload["width"])
        rows = [np.asarray(payload["classes"][c.value], dtype=np.float64).reshape(n_ctx, width)
                for c in CLASSES]
        dtype = getattr(torch, payload.get("dtype", "float32"))
    except (KeyError, ValueError, TypeError, AttributeError) as exc:
        raise LoadError(f"bad prompt checkpoint ({exc})") from None
    return WeatherPrompts(torch.from_numpy(np.stack(rows)).to(dtype))


def save_prompts(prompts: WeatherPrompts, path) -> None:
    atomic_write_text(path, prompts_to_json(prompts))


def load_prompts(path) -> WeatherPrompts:
    return prompts_from_json(Path(path).read_text(encoding="utf-8"))
