"""Pseudo-label database for the unlabeled real images.

Labels are snapped to the 16-bit grid when stored, so the PNG files written
by :func:`save_db` reproduce them exactly and a save/load round trip is
lossless. Scores are always computed on the stored (snapped) label.
"""

from __future__ import annotations

import dataclasses
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assessment import ScoreCache, assess, ensemble_assess
from .core import (ImageSample, UnlabeledSet, atomic_write_text, quantize16, read_image,
                   write_png16)
from .errors import DomainError, InitializationError, LoadError

MANIFEST = "manifest.jsonl"
LABEL_DIR = "labels"


@dataclass(frozen=True)
class LabelSource:
    """Where a label came from: an init candidate, or a teacher prediction."""

    kind: str  # "init_candidate" | "teacher"
    method: str | None = None
    round: int | None = None
    iteration: int | None = None

    def to_dict(self) -> dict:
        if self.kind == "init_candidate":
            return {"kind": self.kind, "method": self.method}
        return {"kind": self.kind, "round": self.round, "iteration": self.iteration}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSource":
        if d["kind"] == "init_candidate":
            return cls("init_candidate", method=d["method"])
        if d["kind"] == "teacher":
            return cls("teacher", round=int(d["round"]), iteration=int(d["iteration"]))
        raise ValueError(f"unknown source kind {d['kind']!r}")


@dataclass(frozen=True, eq=False)
class PseudoLabelRecord:
    image_id: str
    label_pixels: np.ndarray
    score_cache: dict
    source: LabelSource
    version: int = 1

    def __post_init__(self):
        arr = np.array(self.label_pixels, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "label_pixels", arr)
        object.__setattr__(self, "score_cache", dict(self.score_cache))
        for expert, s in self.score_cache.items():
            if not 1.0 <= s <= 5.0:
                raise DomainError(f"{self.image_id}: cached score {s} for {expert} outside [1, 5]")

    def as_sample(self) -> ImageSample:
        return ImageSample(self.image_id, self.label_pixels)

    def same_as(self, other: "PseudoLabelRecord") -> bool:
        return (self.image_id == other.image_id and self.version == other.version
                and self.source == other.source and self.score_cache == other.score_cache
                and np.array_equal(self.label_pixels, other.label_pixels))


@dataclass(frozen=True, eq=False)
class CandidateSet:
    image_id: str
    candidates: tuple  # ((method_name, pixels), ...)

    def __post_init__(self):
        cands = tuple((str(m), np.asarray(p, dtype=np.float64)) for m, p in self.candidates)
        if not cands:
            raise InitializationError(f"{self.image_id}: no candidates", [self.image_id])
        object.__setattr__(self, "candidates", cands)


@dataclass
class ReassessSummary:
    replaced: int
    deltas: dict = field(default_factory=dict)  # image_id -> fresh mean - stored mean


class PseudoLabelDB:
    """image_id -> current best pseudo-label.

    Single writer; records are immutable and swapped whole, so concurrent
    readers never see a half-replaced record.
    """

    def __init__(self, records, template: str, cache: ScoreCache | None = None):
        self.records: dict[str, PseudoLabelRecord] = {r.image_id: r for r in records}
        self.template = template
        self.cache = cache
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.records)

    def __getitem__(self, image_id: str) -> PseudoLabelRecord:
        try:
            return self.records[image_id]
        except KeyError:
            raise KeyError(f"no pseudo-label record for {image_id!r}") from None

    def ids(self) -> list[str]:
        return sorted(self.records)

    def labels(self, ids) -> np.ndarray:
        return np.stack([self[i].label_pixels for i in ids])

    def mean_score(self, experts=None) -> float:
        """Mean over images of the mean cached score (over ``experts`` if given)."""
        per_image = []
        for rec in self.records.values():
            names = list(rec.score_cache) if experts is None else list(experts)
            per_image.append(np.mean([rec.score_cache[e] for e in names]))
        return float(np.mean(per_image))

    def _swap(self, record: PseudoLabelRecord) -> None:
        with self._lock:
            self.records[record.image_id] = record

    def equals(self, other: "PseudoLabelDB") -> bool:
        return self.records.keys() == other.records.keys() and all(
            r.same_as(other.records[i]) for i, r in self.records.items())


def init_db(unlabeled: UnlabeledSet, candidates: dict, experts, template: str, *,
            cache: ScoreCache | None = None) -> PseudoLabelDB:
    """Store, per image, the candidate with the highest mean ensemble score.

    Ties go to the first-listed method.
    """
    missing = [s.id for s in unlabeled if s.id not in candidates]
    if missing:
        raise InitializationError(f"no candidates for: {', '.join(missing)}", missing)
    experts = list(experts)
    records = []
    for sample in unlabeled:
        cset = candidates[sample.id]
        if not isinstance(cset, CandidateSet):
            cset = CandidateSet(sample.id, cset)
        best = None
        for method, pixels in cset.candidates:
            if pixels.shape != sample.pixels.shape:
                raise InitializationError(
                    f"{sample.id}: candidate {method!r} has shape {pixels.shape}", [sample.id])
            label = quantize16(pixels)
            table = ensemble_assess([ImageSample(sample.id, label)], experts, template,
                                    cache=cache)
            scores = table.rows[sample.id]
            mean = float(np.mean([scores[e.name] for e in experts]))
            if best is None or mean > best[0]:
                best = (mean, method, label, scores)
        _, method, label, scores = best
        records.append(PseudoLabelRecord(sample.id, label, scores,
                                         LabelSource("init_candidate", method=method)))
    return PseudoLabelDB(records, template, cache)


def _cached_score(db: PseudoLabelDB, record: PseudoLabelRecord, expert) -> float:
    s = record.score_cache.get(expert.name)
    if s is None:
        s = assess(record.as_sample(), expert, db.template, db.cache).value
        db._swap(dataclasses.replace(record, score_cache={**record.score_cache, expert.name: s}))
    return s


def maybe_update(db: PseudoLabelDB, image_id: str, new_prediction, online_expert, *,
                 round: int = 0, iteration: int = 0) -> bool:
    """Replace the stored label iff the online expert scores the prediction higher.

    Both sides are judged by the same expert; the stored side is scored lazily
    and cached. On replacement the score cache is reset to the judging expert.
    """
    record = db[image_id]
    pixels = new_prediction.pixels if isinstance(new_prediction, ImageSample) else new_prediction
    pixels = quantize16(pixels)
    if pixels.shape != record.label_pixels.shape:
        raise DomainError(f"{image_id}: prediction shape {pixels.shape} does not match label")
    s_old = _cached_score(db, record, online_expert)
    s_new = assess(ImageSample(image_id, pixels), online_expert, db.template, db.cache).value
    if s_new > s_old:
        db._swap(PseudoLabelRecord(image_id, pixels, {online_expert.name: s_new},
                                   LabelSource("teacher", round=round, iteration=iteration),
                                   db[image_id].version + 1))
        return True
    return False


def full_reassess(db: PseudoLabelDB, fresh_predictions: dict, experts, *,
                  round: int = 0, iteration: int = 0) -> ReassessSummary:
    """Ensemble comparison of fresh predictions against every stored label.

    All scoring happens before any record changes, so an assessment failure
    leaves the database untouched.
    """
    experts = list(experts)
    if not experts:
        raise DomainError("full re-assessment needs at least one expert")
    ids = sorted(fresh_predictions)
    for i in ids:
        db[i]
    fresh = {i: quantize16(fresh_predictions[i]) for i in ids}
    stale = [db[i].as_sample() for i in ids
             if any(e.name not in db[i].score_cache for e in experts)]
    stored_table = ensemble_assess(stale, experts, db.template, cache=db.cache) if stale else None
    fresh_table = ensemble_assess([ImageSample(i, fresh[i]) for i in ids], experts,
                                  db.template, cache=db.cache)
    names = [e.name for e in experts]
    summary = ReassessSummary(0)
    for i in ids:
        record = db[i]
        cache = dict(record.score_cache)
        if stored_table is not None and i in stored_table.rows:
            cache.update(stored_table.rows[i])
        old = float(np.mean([cache[n] for n in names]))
        new = float(np.mean([fresh_table.rows[i][n] for n in names]))
        summary.deltas[i] = new - old
        if new > old:
            db._swap(PseudoLabelRecord(i, fresh[i], fresh_table.rows[i],
                                       LabelSource("teacher", round=round, iteration=iteration),
                                       record.version + 1))
            summary.replaced += 1
        elif cache != record.score_cache:
            db._swap(dataclasses.replace(record, score_cache=cache))
    return summary


# -- persistence ---------------------------------------------------------------

def manifest_text(db: PseudoLabelDB) -> str:
    lines = []
    for i in db.ids():
        r = db[i]
        lines.append(json.dumps({
            "image_id": i,
            "label": f"{LABEL_DIR}/{i}.png",
            "version": r.version,
            "source": r.source.to_dict(),
            "score_cache": dict(sorted(r.score_cache.items())),
            "shape": list(r.label_pixels.shape),
        }, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def save_db(db: PseudoLabelDB, directory) -> None:
    """Write labels, then the manifest (the authoritative index) atomically."""
    directory = Path(directory)
    labels = directory / LABEL_DIR
    labels.mkdir(parents=True, exist_ok=True)
    for i in db.ids():
        write_png16(labels / f"{i}.png", db[i].label_pixels)
    atomic_write_text(directory / MANIFEST, manifest_text(db))


def load_db(directory, template: str, cache: ScoreCache | None = None) -> PseudoLabelDB:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise LoadError(f"no manifest at {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pixels = read_image(directory / rec["label"])
            if list(pixels.shape) != rec["shape"]:
                raise ValueError(f"label shape {pixels.shape} != manifest {rec['shape']}")
            records.append(PseudoLabelRecord(
                rec["image_id"], pixels, {k: float(v) for k, v in rec["score_cache"].items()},
                LabelSource.from_dict(rec["source"]), int(rec["version"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, DomainError) as exc:
            raise LoadError(f"corrupt manifest record ({exc})", line=lineno) from None
    return PseudoLabelDB(records, template, cache)

