"""Visibility scores from rating logits, expert ensembles and VLM-Vis."""

from __future__ import annotations

import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backends.base import ExpertId, RatingBackend, RatingLogits
from .core import ImageSample, content_hash, text_hash
from .errors import DomainError, PartialResultError, ProtocolError, TransportError


def score_from_logits(logits) -> float:
    """Expected rating under the softmax of the five rating-token logits.

    Rating i (1..5) is bound to logit i; the result lies in [1, 5].
    """
    values = np.asarray(logits.logits if isinstance(logits, RatingLogits) else logits,
                        dtype=np.float64)
    if values.shape != (5,) or not np.all(np.isfinite(values)):
        raise DomainError("expected five finite logits")
    z = np.exp(values - values.max())
    p = z / z.sum()
    return float(min(5.0, max(1.0, np.dot(np.arange(1, 6), p))))


@dataclass(frozen=True)
class VisibilityScore:
    value: float
    expert: ExpertId

    def __post_init__(self):
        if not 1.0 <= self.value <= 5.0:
            raise DomainError(f"visibility score {self.value} outside [1, 5]")


class ScoreCache:
    """(content hash, expert, template hash) -> score, optionally persisted.

    The backing file is append-only JSON lines; later records win.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._scores: dict[tuple[str, str, str], float] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self._scores[(rec["content_hash"], rec["expert"], rec["template_hash"])] = \
                        rec["score"]

    @staticmethod
    def key(image: ImageSample, expert: str, template: str) -> tuple[str, str, str]:
        return (content_hash(image.pixels), expert, text_hash(template))

    def get(self, key):
        with self._lock:
            return self._scores.get(key)

    def put(self, key, score: float) -> None:
        with self._lock:
            if self._scores.get(key) == score:
                return
            self._scores[key] = score
            if self.path is not None:
                rec = {"content_hash": key[0], "expert": key[1], "template_hash": key[2],
                       "score": score}
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def __len__(self):
        return len(self._scores)


def assess(image: ImageSample, expert: RatingBackend, template: str,
           cache: ScoreCache | None = None) -> VisibilityScore:
    key = ScoreCache.key(image, expert.name, template) if cache is not None else None
    if key is not None:
        hit = cache.get(key)
        if hit is not None:
            return VisibilityScore(hit, expert.expert_id)
    value = score_from_logits(expert.rate_image(image, template))
    if key is not None:
        cache.put(key, value)
    return VisibilityScore(value, expert.expert_id)


@dataclass
class ExpertScoreTable:
    """rows[image_id][expert_name] -> visibility score in [1, 5]."""

    rows: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def experts(self) -> list[str]:
        return sorted({e for row in self.rows.values() for e in row})

    def column(self, expert: str) -> dict[str, float]:
        return {i: row[expert] for i, row in self.rows.items() if expert in row}

    def mean_score(self, image_id: str, experts=None) -> float:
        row = self.rows[image_id]
        names = list(row) if experts is None else list(experts)
        return float(np.mean([row[e] for e in names]))

    def to_records(self) -> list[dict]:
        return [{"image_id": i, "scores": dict(sorted(self.rows[i].items()))}
                for i in sorted(self.rows)]

    @classmethod
    def from_records(cls, records) -> "ExpertScoreTable":
        return cls({r["image_id"]: dict(r["scores"]) for r in records})


def _assess_with_retry(image, expert, template, retries, cache):
    for attempt in range(retries + 1):
        try:
            return assess(image, expert, template, cache).value
        except TransportError:
            if attempt == retries:
                return None
        except ProtocolError:
            return None


def ensemble_assess(images, experts, template: str, *, retries: int = 2,
                    cache: ScoreCache | None = None) -> ExpertScoreTable:
    """Score every image with every expert.

    Experts that advertise ``max_in_flight > 1`` are queried concurrently;
    the table does not depend on completion order. Transport errors are
    retried; an image that still fails for any expert is reported through
    :class:`PartialResultError`, whose ``partial`` holds the successful cells.
    """
    experts = list(experts)
    if not experts:
        raise DomainError("ensemble needs at least one expert")
    images = list(images)
    rows: dict[str, dict[str, float]] = {img.id: {} for img in images}
    failed: set[str] = set()
    for expert in experts:
        workers = max(1, int(getattr(expert, "max_in_flight", 1)))
        if workers > 1 and len(images) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                values = list(pool.map(
                    lambda im: _assess_with_retry(im, expert, template, retries, cache), images))
        else:
            values = [_assess_with_retry(im, expert, template, retries, cache) for im in images]
        for img, value in zip(images, values):
            if value is None:
                failed.add(img.id)
            else:
                rows[img.id][expert.name] = value
    table = ExpertScoreTable(rows)
    if failed:
        raise PartialResultError(failed, partial=table)
    return table


def vlm_vis(table: ExpertScoreTable) -> dict[str, float]:
    """Per-expert min-max standardization, then the mean over experts.

    A column whose scores are all equal standardizes to 0.5.
    """
    if not table.rows:
        raise DomainError("cannot compute VLM-Vis of an empty table")
    experts = table.experts
    if not experts or any(set(row) != set(experts) for row in table.rows.values()):
        raise DomainError("every image needs a score from every expert")
    normalized: dict[str, list[float]] = {i: [] for i in table.rows}
    for expert in experts:
        column = table.column(expert)
        lo, hi = min(column.values()), max(column.values())
        for image_id, s in column.items():
            normalized[image_id].append(0.5 if hi == lo else (s - lo) / (hi - lo))
    return {i: math.fsum(v) / len(v) for i, v in normalized.items()}


def pooled_vlm_vis(tables: dict) -> dict[str, dict[str, float]]:
    """VLM-Vis of several methods' tables standardized over one shared pool.

    ``tables`` maps method name -> :class:`ExpertScoreTable`. Comparing
    methods needs a common min-max range, so every row of every method
    enters the same normalization. Returns method -> image_id -> score.
    """
    pooled = ExpertScoreTable({f"{m}\x00{i}": row for m, t in tables.items()
                               for i, row in t.rows.items()})
    vis = vlm_vis(pooled)
    out: dict[str, dict[str, float]] = {m: {} for m in tables}
    for key, value in vis.items():
        method, image_id = key.split("\x00", 1)
        out[method][image_id] = value
    return out


def method_means(tables: dict) -> dict[str, float]:
    """Mean pooled VLM-Vis per method."""
    return {m: math.fsum(v.values()) / len(v) for m, v in pooled_vlm_vis(tables).items()}
