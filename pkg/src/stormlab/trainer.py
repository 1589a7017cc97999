"""Mean-teacher training loop with judge-gated pseudo-label updates.

Each round trains against one online judge. At a round boundary the whole
expert ensemble re-assesses the pseudo-labels against fresh teacher
predictions, the weather prompts are refit, and descriptions of images whose
label changed are rebuilt.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import pickle
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .assessment import ExpertScoreTable, ensemble_assess, method_means
from .backends.base import BackendRegistry, ExpertKind
from .core import LabeledPair, TrainConfig, UnlabeledSet, atomic_write_text, spawn_rngs
from .errors import DomainError, LoadError, TrainingError
from .objectives import (LossBreakdown, appearance_loss, dual_target_feat_loss,
                         pseudo_label_loss, total_loss, weighted_total)
from .pseudodb import (CandidateSet, PseudoLabelDB, full_reassess, init_db, load_db,
                       maybe_update, save_db)
from .semantics import (IclExampleSet, PairStore, build_pair_store, description_loss,
                        load_icl_examples, load_pair_store, refresh_descriptions,
                        save_pair_store)
from .weatherprompt import (WeatherPrompts, init_prompts, load_prompts, save_prompts,
                            train_prompts, wpl_loss)

log = logging.getLogger(__name__)


# -- model ---------------------------------------------------------------------

class ToyRestorer(nn.Module):
    """Residual restorer: full-res head, two stride-2 stages, residual body.

    The output conv starts at zero, so a fresh model is the identity map.
    About 56k parameters with the default widths.
    """

    architecture_id = "toy-residual-v1"

    def __init__(self, width: int = 16, inner: int = 40):
        super().__init__()
        self.head = nn.Conv2d(3, width, 3, padding=1)
        self.down1 = nn.Conv2d(width, inner, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(inner, inner, 3, stride=2, padding=1)
        self.body1 = nn.Conv2d(inner, inner, 3, padding=1)
        self.body2 = nn.Conv2d(inner, inner, 3, padding=1)
        self.up = nn.Conv2d(inner, width, 3, padding=1)
        self.tail = nn.Conv2d(width, 3, 3, padding=1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.head(x))
        d = F.relu(self.down2(F.relu(self.down1(h))))
        d = d + self.body2(F.relu(self.body1(d)))
        u = F.interpolate(self.up(d), size=h.shape[-2:], mode="bilinear", align_corners=False)
        return (x + self.tail(F.relu(u + h))).clamp(0.0, 1.0)


def build_model(seed: int) -> ToyRestorer:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return ToyRestorer()
    finally:
        torch.random.set_rng_state(gen_state)


def flat_parameters(model: nn.Module) -> torch.Tensor:
    return nn.utils.parameters_to_vector([p.detach() for p in model.parameters()])


# -- EMA -----------------------------------------------------------------------

def ema_update(teacher_params, student_params, decay: float):
    """Return decay·teacher + (1 − decay)·student, element-wise."""
    if not 0.0 <= decay <= 1.0:
        raise DomainError(f"EMA decay must lie in [0, 1], got {decay}")
    if len(teacher_params) != len(student_params):
        raise DomainError("teacher and student parameter vectors differ in length")
    return decay * teacher_params + (1.0 - decay) * student_params


@torch.no_grad()
def ema_update_model(teacher: nn.Module, student: nn.Module, decay: float) -> None:
    if not 0.0 <= decay <= 1.0:
        raise DomainError(f"EMA decay must lie in [0, 1], got {decay}")
    for t, s in zip(teacher.parameters(), student.parameters()):
        t.mul_(decay).add_(s, alpha=1.0 - decay)


# -- data ----------------------------------------------------------------------

def to_batch(pixels) -> torch.Tensor:
    """List of H×W×3 arrays -> float32 (B, 3, H, W) tensor."""
    return torch.from_numpy(np.stack(pixels).transpose(0, 3, 1, 2).astype(np.float32))


def from_batch(batch: torch.Tensor) -> np.ndarray:
    return batch.detach().permute(0, 2, 3, 1).to(torch.float64).numpy()


@torch.no_grad()
def restore_images(model: nn.Module, samples, batch_size: int = 16) -> dict:
    """id -> restored pixels (float64, clamped to [0, 1])."""
    model.eval()
    out = {}
    samples = list(samples)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        for s, pred in zip(chunk, from_batch(model(to_batch([s.pixels for s in chunk])))):
            out[s.id] = np.clip(pred, 0.0, 1.0)
    return out


class EpochSampler:
    """Batches drawn from successive random permutations of ``range(n)``."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng = n, batch, rng
        self._perm: np.ndarray | None = None
        self._pos = 0

    def next(self) -> list[int]:
        out: list[int] = []
        while len(out) < self.batch:
            if self._perm is None or self._pos >= self.n:
                self._perm = self.rng.permutation(self.n)
                self._pos = 0
            take = min(self.batch - len(out), self.n - self._pos)
            out.extend(int(i) for i in self._perm[self._pos:self._pos + take])
            self._pos += take
        return out

    def state_dict(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "pos": self._pos,
                "perm": None if self._perm is None else self._perm.tolist()}

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._pos = state["pos"]
        self._perm = None if state["perm"] is None else np.asarray(state["perm"])


@dataclass
class TrainingData:
    labeled: list
    unlabeled: UnlabeledSet
    candidates: dict | None = None
    references: dict | None = None
    icl: IclExampleSet = field(default_factory=load_icl_examples)

    def __post_init__(self):
        if not self.labeled or not len(self.unlabeled):
            raise TrainingError("labeled and unlabeled sets must be nonempty")
        for pair in self.labeled:
            if not isinstance(pair, LabeledPair):
                raise TrainingError("labeled items must be LabeledPair")


@dataclass
class Suite:
    """The backends one training run talks to, resolved from a registry."""

    raters: list
    encoder: object
    extractor: object
    captioner: object | None
    rewriter: object | None

    @classmethod
    def from_registry(cls, registry: BackendRegistry) -> "Suite":
        raters = registry.raters
        if not raters:
            raise TrainingError("at least one rating expert is required")
        opt = lambda kind: registry.all(kind)[0] if registry.all(kind) else None  # noqa: E731
        return cls(raters, registry.get(ExpertKind.EMBED), registry.get(ExpertKind.FEATURE),
                   opt(ExpertKind.CAPTION), opt(ExpertKind.REWRITE))


# -- state ---------------------------------------------------------------------

@dataclass
class TrainState:
    student: ToyRestorer
    teacher: ToyRestorer
    optimizer: torch.optim.Optimizer
    db: PseudoLabelDB
    prompts: WeatherPrompts
    pairs: PairStore
    labeled_sampler: EpochSampler
    unlabeled_sampler: EpochSampler
    round: int = 0
    iteration: int = 0
    online_expert: str | None = None
    prompt_emb: torch.Tensor | None = None
    last_replaced: int = 0
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.teacher.architecture_id != self.student.architecture_id:
            raise TrainingError("teacher and student architectures differ")


def _refresh_prompt_embedding(state: TrainState, encoder) -> None:
    with torch.no_grad():
        state.prompt_emb = encoder.encode_prompts(state.prompts.context.to(torch.float32))


def train_step(state: TrainState, labeled_batch, unlabeled_batch, config: TrainConfig,
               suite: Suite) -> tuple[TrainState, LossBreakdown]:
    """One student update, one EMA update and (on schedule) online label updates.

    Unlabeled terms with zero weight are skipped entirely. The semantics term
    averages over images with a validated description pair only.
    """
    w = config.loss_weights
    student, teacher = state.student, state.teacher
    student.train()
    sup = appearance_loss(student(to_batch([p.degraded.pixels for p in labeled_batch])),
                          to_batch([p.clean.pixels for p in labeled_batch]))
    zero = sup.new_zeros(())
    ps = wpl = sem = feat = zero

    ids = [s.id for s in unlabeled_batch]
    x_u = to_batch([s.pixels for s in unlabeled_batch]) if unlabeled_batch else None
    if x_u is not None and any(v > 0 for v in w.as_tuple()):
        if config.vlm_updates:
            target = to_batch(list(state.db.labels(ids)))
        else:
            with torch.no_grad():
                target = teacher(x_u)
        pred = student(x_u)
        if w.w1 > 0:
            ps = pseudo_label_loss(pred, target)
        if w.w2 > 0 or w.w3 > 0:
            emb = suite.encoder.encode_pixels(pred)
            if w.w2 > 0:
                wpl = wpl_loss(emb, state.prompt_emb, config.temperature)
            if w.w3 > 0:
                valid = [(k, state.pairs.validated(i)) for k, i in enumerate(ids)]
                valid = [(k, p) for k, p in valid if p is not None]
                if valid:
                    rows = torch.tensor([k for k, _ in valid])
                    pos = torch.tensor(np.stack([p.emb_pos.values for _, p in valid]),
                                       dtype=emb.dtype)
                    neg = torch.tensor(np.stack([p.emb_neg.values for _, p in valid]),
                                       dtype=emb.dtype)
                    sem = description_loss(emb[rows], pos, neg, config.temperature).mean()
        if w.w4 > 0:
            fx = suite.extractor.features
            feat = dual_target_feat_loss(fx(pred), fx(target), fx(x_u))

    total = weighted_total(sup, ps, wpl, sem, feat, w)
    breakdown = total_loss(sup.detach(), ps.detach(), wpl.detach(), sem.detach(),
                           feat.detach(), w)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    ema_update_model(teacher, student, config.ema_decay)

    state.last_replaced = 0
    interval = config.assessment_interval
    if (x_u is not None and config.vlm_updates and interval is not None
            and state.iteration % interval == 0):
        teacher.eval()
        with torch.no_grad():
            preds = from_batch(teacher(x_u))
        expert = next((e for e in suite.raters if e.name == state.online_expert), None)
        if expert is None:
            raise TrainingError(f"online expert {state.online_expert!r} is not a registered rater")
        for image_id, p in zip(ids, preds):
            state.last_replaced += maybe_update(state.db, image_id, np.clip(p, 0.0, 1.0),
                                                expert, round=state.round,
                                                iteration=state.iteration)
    state.iteration += 1
    return state, breakdown


# -- checkpoints -----------------------------------------------------------------

CHECKPOINT_STATE = "state.pt"
MODEL_FILE = "model.pt"


def save_checkpoint(state: TrainState, config: TrainConfig, directory) -> Path:
    """Write a self-contained checkpoint directory via temp-then-rename."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=directory.parent, prefix=f".{directory.name}."))
    try:
        torch.save({
            "architecture_id": state.student.architecture_id,
            "student": state.student.state_dict(),
            "teacher": state.teacher.state_dict(),
            "optimizer": state.optimizer.state_dict(),
            "round": state.round,
            "iteration": state.iteration,
            "labeled_sampler": state.labeled_sampler.state_dict(),
            "unlabeled_sampler": state.unlabeled_sampler.state_dict(),
            "history": state.history,
            "config_digest": config.digest(),
        }, tmp / CHECKPOINT_STATE)
        save_db(state.db, tmp / "db")
        save_prompts(state.prompts, tmp / "prompts.json")
        save_pair_store(state.pairs, tmp / "pairs.jsonl")
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def load_model(path) -> ToyRestorer:
    """Student weights from a checkpoint or run directory, or a weights file."""
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_STATE if (path / CHECKPOINT_STATE).exists() else path / MODEL_FILE
    try:
        payload = torch.load(path, weights_only=False)
        model = ToyRestorer()
        if payload.get("architecture_id") != model.architecture_id:
            raise LoadError(f"unsupported architecture {payload.get('architecture_id')!r}")
        model.load_state_dict(payload["student"])
    except (OSError, KeyError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise LoadError(f"cannot load model from {path}: {exc}") from None
    model.eval()
    return model


def _restore_state(state: TrainState, path: Path, config: TrainConfig, suite: Suite) -> None:
    payload = torch.load(path / CHECKPOINT_STATE, weights_only=False)
    if payload["config_digest"] != config.digest():
        raise TrainingError("checkpoint was written with a different config")
    state.student.load_state_dict(payload["student"])
    state.teacher.load_state_dict(payload["teacher"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.labeled_sampler.load_state_dict(payload["labeled_sampler"])
    state.unlabeled_sampler.load_state_dict(payload["unlabeled_sampler"])
    state.round, state.iteration = payload["round"], payload["iteration"]
    state.history = payload["history"]
    state.db = load_db(path / "db", config.rating_template)
    state.prompts = load_prompts(path / "prompts.json")
    state.pairs = load_pair_store(path / "pairs.jsonl", suite.encoder) \
        if (path / "pairs.jsonl").read_text() else PairStore()
    _refresh_prompt_embedding(state, suite.encoder)


# -- orchestration ---------------------------------------------------------------

@dataclass
class TrainingReport:
    db_mean_before: float
    db_mean_after: float
    vlm_vis_before: float
    vlm_vis_after: float
    online_experts: list
    rounds: list
    scores_before: dict
    scores_after: dict

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrainingResult:
    model: ToyRestorer
    teacher: ToyRestorer
    db: PseudoLabelDB
    report: TrainingReport | None
    state: TrainState
    log: list


def _label_scores(db: PseudoLabelDB, raters, template: str) -> dict:
    samples = [db[i].as_sample() for i in db.ids()]
    return ensemble_assess(samples, raters, template).rows


def _mean_of_rows(rows: dict) -> float:
    return float(np.mean([np.mean(list(r.values())) for r in rows.values()]))


def _initial_state(config: TrainConfig, data: TrainingData, suite: Suite,
                   db: PseudoLabelDB | None = None) -> TrainState:
    labeled_rng, unlabeled_rng, prompt_rng = spawn_rngs(config.seed, 3)
    student = build_model(config.seed)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.Adam(student.parameters(), lr=config.learning_rate)

    if db is None:
        if config.init_pseudo_labels and data.candidates:
            candidates = data.candidates
        else:
            candidates = {s.id: CandidateSet(s.id, (("identity", s.pixels),))
                          for s in data.unlabeled}
        db = init_db(data.unlabeled, candidates, suite.raters, config.rating_template)
    elif set(db.ids()) != {s.id for s in data.unlabeled}:
        raise TrainingError("pseudo-label database ids do not match the unlabeled set")

    prompts = init_prompts(config.n_ctx, suite.encoder.prompt_width, prompt_rng, suite.encoder)
    if config.loss_weights.w2 > 0:
        if not data.references:
            raise TrainingError("prompt learning needs reference images per weather class")
        prompts = train_prompts(prompts, data.references, suite.encoder,
                                epochs=config.prompt_epochs, lr=config.prompt_lr,
                                temperature=config.temperature)
    pairs = PairStore()
    if config.loss_weights.w3 > 0:
        if suite.captioner is None or suite.rewriter is None:
            raise TrainingError("the semantics term needs caption and rewrite backends")
        pairs = build_pair_store(data.unlabeled, suite.captioner, suite.rewriter, data.icl,
                                 suite.encoder, db)
    state = TrainState(student, teacher, optimizer, db, prompts, pairs,
                       EpochSampler(len(data.labeled), config.batch_labeled, labeled_rng),
                       EpochSampler(len(data.unlabeled), config.batch_unlabeled, unlabeled_rng))
    _refresh_prompt_embedding(state, suite.encoder)
    state.history = {"scores_before": _label_scores(db, suite.raters, config.rating_template),
                     "rounds": [], "online_experts": []}
    return state


def run_round(state: TrainState, config: TrainConfig, data: TrainingData, suite: Suite, *,
              checkpoint_dir=None, log_records: list | None = None,
              stop_at: int | None = None) -> TrainState:
    """Train until the end of ``state.round`` (or global iteration ``stop_at``)."""
    end = (state.round + 1) * config.iterations_per_round
    if stop_at is not None:
        end = min(end, stop_at)
    items = data.unlabeled.items
    counts = state.history.setdefault("online_replaced", {})
    key = str(state.round)
    while state.iteration < end:
        lab = [data.labeled[i] for i in state.labeled_sampler.next()]
        unl = [items[i] for i in state.unlabeled_sampler.next()]
        state, breakdown = train_step(state, lab, unl, config, suite)
        counts[key] = counts.get(key, 0) + state.last_replaced
        if log_records is not None:
            log_records.append({"iteration": state.iteration - 1, "round": state.round,
                                "online_expert": state.online_expert,
                                "replaced": state.last_replaced, **breakdown.as_dict()})
        if (checkpoint_dir is not None and state.iteration % config.checkpoint_interval == 0
                and state.iteration < (state.round + 1) * config.iterations_per_round):
            save_checkpoint(state, config, Path(checkpoint_dir) / f"iter-{state.iteration:07d}")
    return state


def _round_boundary(state: TrainState, config: TrainConfig, data: TrainingData,
                    suite: Suite) -> dict:
    summary = {"round": state.round, "online_expert": state.online_expert,
               "online_replaced": state.history.get("online_replaced", {}).get(
                   str(state.round), 0)}
    if config.boundary_updates:
        fresh = restore_images(state.teacher, data.unlabeled)
        result = full_reassess(state.db, fresh, suite.raters, round=state.round,
                               iteration=state.iteration)
        summary["boundary_replaced"] = result.replaced
        if config.loss_weights.w2 > 0:
            state.prompts = train_prompts(state.prompts, data.references, suite.encoder,
                                          epochs=config.prompt_epochs, lr=config.prompt_lr,
                                          temperature=config.temperature)
            _refresh_prompt_embedding(state, suite.encoder)
        if config.loss_weights.w3 > 0:
            summary["descriptions_rebuilt"] = refresh_descriptions(
                state.pairs, state.db, data.unlabeled.by_id(), suite.captioner, suite.rewriter,
                data.icl, suite.encoder)
    return summary


def run_training(config: TrainConfig, data: TrainingData, registry: BackendRegistry, *,
                 db: PseudoLabelDB | None = None, out_dir=None, resume=None,
                 stop_at: int | None = None) -> TrainingResult:
    """Initialize pseudo-labels, then run ``config.rounds`` rounds.

    The online judge of round r is ``raters[r % len(raters)]``. With
    ``out_dir`` set, per-step records go to ``train_log.jsonl`` and
    checkpoints to ``checkpoints/``. ``stop_at`` halts after that many global
    iterations (no report) and exists to exercise resumption. A ``db`` passed
    in replaces candidate initialization.
    """
    suite = Suite.from_registry(registry)
    state = _initial_state(config, data, suite, db)
    if resume is not None:
        _restore_state(state, Path(resume), config, suite)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out_dir / "checkpoints" if out_dir is not None else None
    records: list = []
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = (out_dir / "train_log.jsonl").open("a" if resume is not None else "w",
                                                   encoding="utf-8")
    try:
        while state.round < config.rounds:
            state.online_expert = suite.raters[state.round % len(suite.raters)].name
            n_before = len(records)
            run_round(state, config, data, suite, checkpoint_dir=ckpt_dir, log_records=records,
                      stop_at=stop_at)
            if log_fh is not None:
                log_fh.writelines(json.dumps(r, sort_keys=True) + "\n"
                                  for r in records[n_before:])
                log_fh.flush()
            if stop_at is not None and state.iteration >= stop_at and \
                    state.iteration < (state.round + 1) * config.iterations_per_round:
                return TrainingResult(state.student, state.teacher, state.db, None, state,
                                      records)
            summary = _round_boundary(state, config, data, suite)
            state.history["rounds"].append(summary)
            state.history["online_experts"].append(state.online_expert)
            log.info("round %d done: %s", state.round, summary)
            state.round += 1
            if ckpt_dir is not None:
                save_checkpoint(state, config, ckpt_dir / f"iter-{state.iteration:07d}")
    finally:
        if log_fh is not None:
            log_fh.close()

    before = state.history["scores_before"]
    after = _label_scores(state.db, suite.raters, config.rating_template)
    vis = method_means({"before": ExpertScoreTable(before), "after": ExpertScoreTable(after)})
    report = TrainingReport(
        db_mean_before=_mean_of_rows(before),
        db_mean_after=_mean_of_rows(after),
        vlm_vis_before=vis["before"],
        vlm_vis_after=vis["after"],
        online_experts=list(state.history["online_experts"]),
        rounds=list(state.history["rounds"]),
        scores_before=before,
        scores_after=after,
    )
    if out_dir is not None:
        atomic_write_text(out_dir / "report.json", json.dumps(report.to_dict(), sort_keys=True,
                                                              indent=1))
        save_db(state.db, out_dir / "db")
        torch.save({"architecture_id": state.student.architecture_id,
                    "student": state.student.state_dict()}, out_dir / MODEL_FILE)
    return TrainingResult(state.student, state.teacher, state.db, report, state, records)
