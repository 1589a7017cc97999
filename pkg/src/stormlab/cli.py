"""``stormlab`` command-line interface.

Exit codes: 0 success, 1 configuration, 2 data, 3 backend, 4 divergence.
Every output file is written via temp-then-rename; JSONL outputs are sorted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .assessment import ExpertScoreTable, ensemble_assess, pooled_vlm_vis
from .backends.base import ExpertKind
from .backends.loader import load_registry
from .core import (DEFAULT_RATING_TEMPLATE, TrainConfig, Weather, atomic_write_text,
                   dump_config, load_config, quantize16, text_hash)
from .errors import (ConfigError, ConfigurationError, DivergenceError, DomainError,
                     InitializationError, LoadError, PartialResultError, ProtocolError,
                     StormlabError, TrainingError, TransportError)

log = logging.getLogger("stormlab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_BACKEND, EXIT_DIVERGENCE = 0, 1, 2, 3, 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(exc, (TransportError, ProtocolError, PartialResultError)):
        return EXIT_BACKEND
    if isinstance(exc, (LoadError, InitializationError, DomainError)):
        return EXIT_DATA
    if isinstance(exc, (ConfigError, ConfigurationError, TrainingError)):
        return EXIT_CONFIG
    return EXIT_CONFIG


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def _require(registry, *kinds: ExpertKind) -> None:
    for kind in kinds:
        if not registry.all(kind):
            raise ConfigurationError(f"experts file declares no {kind.value} backend")


def _template(args) -> str:
    if getattr(args, "template", None):
        return args.template
    if getattr(args, "config", None):
        return load_config(args.config).rating_template
    return DEFAULT_RATING_TEMPLATE


def _replace_dir(tmp: Path, target: Path) -> None:
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)


# -- assess --------------------------------------------------------------------

def assessment_records(table: ExpertScoreTable, errors=()) -> list[dict]:
    records = [{"kind": "score", **r} for r in table.to_records()]
    records += [{"kind": "error", "path": p, "message": m} for p, m in sorted(errors)]
    return records


def cmd_assess(args) -> int:
    from .imagedir import scan_image_dir

    registry = load_registry(args.experts)
    _require(registry, ExpertKind.RATING)
    scan = scan_image_dir(args.images)
    table = ensemble_assess(scan.samples, registry.raters, _template(args)) \
        if scan.samples else ExpertScoreTable()
    atomic_write_text(args.out, _jsonl(assessment_records(table, scan.errors)))
    for path, message in scan.errors:
        print(f"error: {path}: {message}", file=sys.stderr)
    return EXIT_DATA if scan.errors else EXIT_OK


# -- init-db -------------------------------------------------------------------

def load_candidates(directories, unlabeled) -> dict:
    """image_id -> CandidateSet, one method per directory (named after it)."""
    from .imagedir import load_pixels_by_id
    from .pseudodb import CandidateSet

    per_method = [(Path(d).name, load_pixels_by_id(d)) for d in directories]
    candidates, missing = {}, []
    for sample in unlabeled:
        found = tuple((m, px[sample.id]) for m, px in per_method if sample.id in px)
        if found:
            candidates[sample.id] = CandidateSet(sample.id, found)
        else:
            missing.append(sample.id)
    if missing:
        raise InitializationError(f"no candidate restoration for: {', '.join(missing)}", missing)
    return candidates


def cmd_init_db(args) -> int:
    from .core import UnlabeledSet
    from .imagedir import load_image_dir
    from .pseudodb import init_db, save_db

    registry = load_registry(args.experts)
    _require(registry, ExpertKind.RATING)
    unlabeled = UnlabeledSet(tuple(load_image_dir(args.unlabeled)))
    candidates = load_candidates(args.candidates, unlabeled)
    db = init_db(unlabeled, candidates, registry.raters, _template(args))
    target = Path(args.db)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=target.parent, prefix=f".{target.name}."))
    try:
        save_db(db, tmp)
        _replace_dir(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"initialized {len(db)} pseudo-labels, mean score {db.mean_score():.6f}")
    return EXIT_OK


# -- describe ------------------------------------------------------------------

def cmd_describe(args) -> int:
    from .imagedir import load_image_dir
    from .semantics import build_pair_store, load_icl_examples, pair_store_text

    registry = load_registry(args.experts)
    _require(registry, ExpertKind.CAPTION, ExpertKind.REWRITE, ExpertKind.EMBED)
    tag = Weather(args.weather) if args.weather else None
    images = load_image_dir(args.images, default_tag=tag)
    store = build_pair_store(images, registry.get(ExpertKind.CAPTION),
                             registry.get(ExpertKind.REWRITE), load_icl_examples(args.icl),
                             registry.get(ExpertKind.EMBED))
    atomic_write_text(args.out, pair_store_text(store))
    n_valid = sum(p.validated for p in store.pairs.values())
    print(f"validated {n_valid}/{len(store.pairs)} ({store.validation_rate():.3f})")
    return EXIT_OK


# -- train ---------------------------------------------------------------------

def _train_config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def cmd_train(args) -> int:
    from .core import UnlabeledSet
    from .imagedir import load_image_dir, load_labeled_dir, load_reference_dir
    from .pseudodb import load_db
    from .trainer import Suite, TrainingData, run_training

    config = _train_config(args)
    registry = load_registry(args.experts)
    Suite.from_registry(registry)
    tag = Weather(args.weather) if args.weather else None
    labeled = load_labeled_dir(args.labeled)
    unlabeled = UnlabeledSet(tuple(load_image_dir(args.unlabeled, default_tag=tag)))
    references = load_reference_dir(args.references) if args.references else None
    candidates = load_candidates(args.candidates, unlabeled) if args.candidates else None
    data = TrainingData(labeled, unlabeled, candidates, references)
    db = load_db(args.db, config.rating_template) if args.db else None
    if args.dry_run:
        print(f"dry run ok: config {config.digest()}, {len(labeled)} labeled, "
              f"{len(unlabeled)} unlabeled, raters {[r.name for r in registry.raters]}")
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.cfg", dump_config(config))
    result = run_training(config, data, registry, db=db, out_dir=out, resume=args.resume)
    r = result.report
    print(f"db mean {r.db_mean_before:.6f} -> {r.db_mean_after:.6f}; "
          f"VLM-Vis {r.vlm_vis_before:.6f} -> {r.vlm_vis_after:.6f}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------

@dataclass
class MetricReport:
    """Per-image scores, per-weather aggregates and overall VLM-Vis per method."""

    rows: list = field(default_factory=list)  # dicts: method, image_id, weather, scores, vlm_vis
    meta: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)

    def aggregates(self) -> list[dict]:
        groups: dict[tuple, list] = {}
        for row in self.rows:
            groups.setdefault((row["method"], row["weather"]), []).append(row)
            groups.setdefault((row["method"], "all"), []).append(row)
        out = []
        for (method, weather), rows in sorted(groups.items()):
            experts = sorted(rows[0]["scores"])
            out.append({
                "kind": "aggregate", "method": method, "weather": weather, "n": len(rows),
                "vlm_vis": math.fsum(r["vlm_vis"] for r in rows) / len(rows),
                "mean_scores": {e: math.fsum(r["scores"][e] for r in rows) / len(rows)
                                for e in experts},
            })
        return out

    def records(self) -> list[dict]:
        rows = sorted(self.rows, key=lambda r: (r["method"], r["image_id"]))
        return ([{"kind": "meta", **self.meta}]
                + [{"kind": "image", **r} for r in rows]
                + self.aggregates()
                + [{"kind": "error", "path": p, "message": m} for p, m in sorted(self.errors)])

    @classmethod
    def from_records(cls, records) -> "MetricReport":
        report = cls()
        for rec in records:
            kind = rec.get("kind")
            body = {k: v for k, v in rec.items() if k != "kind"}
            if kind == "meta":
                report.meta = body
            elif kind == "image":
                report.rows.append(body)
            elif kind == "error":
                report.errors.append((body["path"], body["message"]))
        return report


def build_metric_report(restored: dict, raters, template: str, weather_of: dict,
                        meta: dict | None = None) -> MetricReport:
    """``restored`` maps method -> list of restored ImageSamples (ids shared)."""
    tables = {m: ensemble_assess(samples, raters, template) for m, samples in restored.items()}
    vis = pooled_vlm_vis(tables)
    report = MetricReport(meta=dict(meta or {}))
    for method, table in tables.items():
        for image_id, scores in table.rows.items():
            report.rows.append({"method": method, "image_id": image_id,
                                "weather": weather_of[image_id], "scores": dict(scores),
                                "vlm_vis": vis[method][image_id]})
    return report


def _file_digest(path: Path) -> str:
    if path.is_dir():
        path = path / "state.pt" if (path / "state.pt").exists() else path / "model.pt"
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def _parse_model_arg(text: str) -> tuple[str, Path]:
    name, sep, path = text.partition("=")
    return (name, Path(path)) if sep else (Path(text).stem or "model", Path(text))


def cmd_eval(args) -> int:
    from .imagedir import scan_image_dir
    from .trainer import load_model, restore_images

    registry = load_registry(args.experts)
    _require(registry, ExpertKind.RATING)
    template = _template(args)
    scan = scan_image_dir(args.test)
    samples = [s for s in scan.samples if s.weather_tag in (Weather.RAIN, Weather.HAZE,
                                                             Weather.SNOW)]
    if not samples:
        raise LoadError(f"no test images under rain/, haze/ or snow/ in {args.test}")
    models = [_parse_model_arg(m) for m in args.model]
    names = [n for n, _ in models] + (["input"] if args.include_inputs else [])
    if len(set(names)) != len(names):
        raise ConfigError("method names must be distinct", key="model")
    # restorations are scored as 16-bit rasters, the precision labels are stored at
    restored = {}
    for name, path in models:
        out = restore_images(load_model(path), samples)
        restored[name] = [s.with_pixels(quantize16(out[s.id])) for s in samples]
    if args.include_inputs:
        restored["input"] = samples
    meta = {
        "config_hash": load_config(args.config).digest() if args.config else None,
        "template_hash": text_hash(template)[:16],
        "backend_ids": [r.name for r in registry.raters],
        "models": {n: _file_digest(p) for n, p in models},
    }
    report = build_metric_report(restored, registry.raters, template,
                                 {s.id: s.weather_tag.value for s in samples}, meta)
    report.errors = scan.errors
    atomic_write_text(args.out, _jsonl(report.records()))
    for agg in report.aggregates():
        print(f"{agg['method']:>12} {agg['weather']:>5} n={agg['n']:<4} VLM-Vis {agg['vlm_vis']:.4f}")
    for path, message in scan.errors:
        print(f"error: {path}: {message}", file=sys.stderr)
    return EXIT_DATA if scan.errors else EXIT_OK


# -- make-toy ------------------------------------------------------------------

def cmd_make_toy(args) -> int:
    from .toydata import write_toy_tree

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        write_toy_tree(tmp, seed=args.seed if args.seed is not None else 0)
        _replace_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"toy fixture written to {out}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stormlab",
                                     description="Judge-guided semi-supervised weather restoration.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def experts(p):
        p.add_argument("--experts", required=True, help="experts JSON file")

    p = sub.add_parser("assess", help="score every image with every rating expert")
    p.add_argument("images")
    experts(p)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="take the rating template from this config")
    p.add_argument("--template")
    p.set_defaults(func=cmd_assess)

    p = sub.add_parser("init-db", help="build the pseudo-label database from candidates")
    p.add_argument("unlabeled")
    p.add_argument("--candidates", nargs="+", required=True,
                   help="one directory per candidate method (method = directory name)")
    experts(p)
    p.add_argument("--db", required=True, help="output database directory")
    p.add_argument("--config")
    p.add_argument("--template")
    p.set_defaults(func=cmd_init_db)

    p = sub.add_parser("describe", help="build negative/positive description pairs")
    p.add_argument("images")
    experts(p)
    p.add_argument("--out", required=True)
    p.add_argument("--icl", help="in-context examples JSONL (default: bundled set)")
    p.add_argument("--weather", choices=[w.value for w in Weather],
                   help="tag for top-level images")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("train", help="run semi-supervised training")
    p.add_argument("--config")
    experts(p)
    p.add_argument("--labeled", required=True, help="directory with degraded/ and clean/")
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--references", help="weather reference images, one subdirectory per class")
    p.add_argument("--candidates", nargs="*", default=[])
    p.add_argument("--db", help="start from this database instead of initializing one")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--seed", type=int)
    p.add_argument("--weather", choices=[w.value for w in Weather],
                   help="tag for top-level unlabeled images")
    p.add_argument("--dry-run", action="store_true",
                   help="validate config, data and backends, then exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="restore a test set and report VLM-Vis")
    p.add_argument("test", help="directory with rain/, haze/ and/or snow/")
    p.add_argument("--model", action="append", required=True,
                   help="checkpoint directory or model file, optionally NAME=PATH; repeatable")
    experts(p)
    p.add_argument("--out", required=True)
    p.add_argument("--include-inputs", action="store_true",
                   help="also score the unrestored inputs as method 'input'")
    p.add_argument("--config")
    p.add_argument("--template")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-toy", help="write the procedural toy fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_make_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StormlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
