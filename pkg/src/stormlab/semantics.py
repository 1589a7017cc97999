"""Negative/positive scene descriptions and the description-contrast loss."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backends.base import EmbeddingVector
from .backends.mock import load_fixture
from .core import ImageSample, atomic_write_text
from .errors import DomainError, LoadError, StormlabError

log = logging.getLogger(__name__)

OVERLAP_THRESHOLD = 0.3
REWRITE_RETRIES = 2


@lru_cache(maxsize=None)
def degradation_lexicon() -> frozenset:
    return frozenset(load_fixture("degradation_lexicon.txt").split())


@lru_cache(maxsize=None)
def stopwords() -> frozenset:
    return frozenset(load_fixture("stopwords.txt").split())


def _words(text: str) -> list[str]:
    return re.findall(r"[a-z]+", text.lower())


def has_degradation_term(text: str) -> bool:
    return any(w in degradation_lexicon() for w in _words(text))


def content_tokens(text: str) -> set[str]:
    lex, stop = degradation_lexicon(), stopwords()
    return {w for w in _words(text) if w not in lex and w not in stop}


def content_overlap(a: str, b: str) -> float:
    """Jaccard similarity of the content tokens of two descriptions."""
    ta, tb = content_tokens(a), content_tokens(b)
    union = ta | tb
    return len(ta & tb) / len(union) if union else 0.0


def is_disentangled(d_neg: str, d_pos: str, threshold: float = OVERLAP_THRESHOLD) -> bool:
    """Positive text is weather-free and keeps enough of the scene content."""
    return (bool(d_pos.strip()) and not has_degradation_term(d_pos)
            and content_overlap(d_neg, d_pos) >= threshold)


@dataclass(frozen=True)
class IclExampleSet:
    pairs: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((str(n), str(p)) for n, p in self.pairs))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.pairs).encode()).hexdigest()[:16]


def load_icl_examples(path=None) -> IclExampleSet:
    text = load_fixture("icl_examples.jsonl") if path is None else \
        Path(path).read_text(encoding="utf-8")
    pairs = []
    for line in text.splitlines():
        if line.strip():
            rec = json.loads(line)
            pairs.append((rec["negative"], rec["positive"]))
    return IclExampleSet(tuple(pairs))


@dataclass(frozen=True, eq=False)
class DescriptionPair:
    image_id: str
    d_neg: str
    d_pos: str
    emb_neg: EmbeddingVector
    emb_pos: EmbeddingVector
    validated: bool
    backend_ids: tuple = ()

    def __post_init__(self):
        if not self.d_neg.strip() or not self.d_pos.strip():
            raise DomainError(f"{self.image_id}: descriptions must be nonempty")
        if self.validated and not is_disentangled(self.d_neg, self.d_pos, 0.0):
            raise DomainError(f"{self.image_id}: validated pair has a weather term in d_pos")

    def same_as(self, other: "DescriptionPair") -> bool:
        return (self.image_id, self.d_neg, self.d_pos, self.validated, self.backend_ids) == \
            (other.image_id, other.d_neg, other.d_pos, other.validated, other.backend_ids) and \
            np.array_equal(self.emb_neg.values, other.emb_neg.values) and \
            np.array_equal(self.emb_pos.values, other.emb_pos.values)


def build_description_pair(image: ImageSample, captioner, rewriter, icl: IclExampleSet,
                           encoder, *, retries: int = REWRITE_RETRIES,
                           threshold: float = OVERLAP_THRESHOLD) -> DescriptionPair:
    """Caption the degraded image, rewrite it to clear weather, then validate.

    A rewrite that fails validation is retried; if every attempt fails the
    pair is kept with ``validated=False`` and stays out of the loss.
    """
    d_neg = captioner.caption_image(image)
    d_pos = ""
    for _ in range(retries + 1):
        d_pos = rewriter.rewrite_description(d_neg, icl.pairs)
        if is_disentangled(d_neg, d_pos, threshold):
            validated = True
            break
    else:
        validated = False
    return DescriptionPair(image.id, d_neg, d_pos, encoder.embed_text(d_neg),
                           encoder.embed_text(d_pos), validated,
                           (captioner.name, rewriter.name, encoder.name))


def description_loss(image_emb: torch.Tensor, pos_emb: torch.Tensor, neg_emb: torch.Tensor,
                     temperature: float = 1.0) -> torch.Tensor:
    """Per-sample −log of the positive description's two-way softmax share."""
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    img = F.normalize(image_emb, dim=-1)
    cos_pos = (img * F.normalize(pos_emb, dim=-1)).sum(-1)
    cos_neg = (img * F.normalize(neg_emb, dim=-1)).sum(-1)
    logits = torch.stack([cos_pos, cos_neg], dim=-1) / temperature
    return -torch.log_softmax(logits, dim=-1)[..., 0]


def sem_loss(restored_embedding: torch.Tensor, pair: DescriptionPair,
             temperature: float = 1.0) -> torch.Tensor:
    if not pair.validated:
        raise DomainError(f"{pair.image_id}: unvalidated description pair")
    dtype = restored_embedding.dtype
    pos = torch.tensor(np.array(pair.emb_pos.values), dtype=dtype)
    neg = torch.tensor(np.array(pair.emb_neg.values), dtype=dtype)
    return description_loss(restored_embedding, pos, neg, temperature).mean()


@dataclass
class PairStore:
    """image_id -> description pair, plus the label version it was built for."""

    pairs: dict = field(default_factory=dict)
    label_versions: dict = field(default_factory=dict)

    def validated(self, image_id: str) -> DescriptionPair | None:
        pair = self.pairs.get(image_id)
        return pair if pair is not None and pair.validated else None

    def validation_rate(self) -> float:
        return sum(p.validated for p in self.pairs.values()) / len(self.pairs) if self.pairs else 0.0

    def equals(self, other: "PairStore") -> bool:
        return self.label_versions == other.label_versions and \
            self.pairs.keys() == other.pairs.keys() and \
            all(p.same_as(other.pairs[i]) for i, p in self.pairs.items())


def build_pair_store(images, captioner, rewriter, icl, encoder, db=None) -> PairStore:
    store = PairStore()
    for image in images:
        store.pairs[image.id] = build_description_pair(image, captioner, rewriter, icl, encoder)
        store.label_versions[image.id] = db[image.id].version if db is not None else 0
    return store


def refresh_descriptions(store: PairStore, db, images: dict, captioner, rewriter, icl,
                         encoder) -> int:
    """Rebuild pairs whose image's pseudo-label changed since the last refresh.

    Descriptions are built from the degraded input in ``images``. Returns the
    number of regenerated pairs; a backend failure marks that pair unvalidated.
    """
    regenerated = 0
    for image_id in db.ids():
        version = db[image_id].version
        if store.label_versions.get(image_id) == version and image_id in store.pairs:
            continue
        try:
            store.pairs[image_id] = build_description_pair(images[image_id], captioner,
                                                           rewriter, icl, encoder)
        except StormlabError as exc:
            log.warning("description refresh failed for %s: %s", image_id, exc)
            old = store.pairs.get(image_id)
            if old is not None:
                store.pairs[image_id] = replace(old, validated=False)
        store.label_versions[image_id] = version
        regenerated += 1
    return regenerated


def pair_store_text(store: PairStore) -> str:
    lines = []
    for image_id in sorted(store.pairs):
        p = store.pairs[image_id]
        lines.append(json.dumps({
            "image_id": image_id, "d_neg": p.d_neg, "d_pos": p.d_pos,
            "validated": p.validated, "backend_ids": list(p.backend_ids),
            "label_version": store.label_versions.get(image_id, 0),
        }, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def save_pair_store(store: PairStore, path) -> None:
    atomic_write_text(path, pair_store_text(store))


def load_pair_store(path, encoder) -> PairStore:
    """Read a pair store; text embeddings are recomputed with ``encoder``."""
    store = PairStore()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            store.pairs[rec["image_id"]] = DescriptionPair(
                rec["image_id"], rec["d_neg"], rec["d_pos"], encoder.embed_text(rec["d_neg"]),
                encoder.embed_text(rec["d_pos"]), bool(rec["validated"]),
                tuple(rec["backend_ids"]))
            store.label_versions[rec["image_id"]] = int(rec["label_version"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"corrupt pair record ({exc})", line=lineno) from None
    return store
