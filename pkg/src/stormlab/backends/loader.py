"""Build a :class:`BackendRegistry` from an experts file.

The experts file is JSON. Relative paths resolve against its directory::

    {
      "rating":  [{"backend": "mock-oracle", "name": "oracle-mae",
                   "references": "clean", "metric": "mae",
                   "scale": 10, "saturation": 0.3},
                  {"backend": "http", "name": "llava", "url": "http://host:8000/rate"}],
      "caption": {"backend": "mock", "scenes": "scenes.json"},
      "rewrite": {"backend": "mock", "mode": "lexicon"},
      "embed":   {"backend": "mock-clip"},
      "feature": {"backend": "mock-pool", "patch": 8}
    }

Only ``rating`` is required; commands check for the kinds they need.
"""

from __future__ import annotations

import json
from pathlib import Path

from ..errors import ConfigError, LoadError
from .base import BackendRegistry
from .http import HttpCaptionBackend, HttpRatingBackend, HttpRewriteBackend
from .mock import (MockCaptioner, MockOracleRater, MockRewriter, PixelStatEncoder,
                   PooledRGBExtractor, TagBasisEncoder)


def _options(entry: dict, allowed: tuple, key: str) -> dict:
    unknown = sorted(set(entry) - set(allowed) - {"backend"})
    if unknown:
        raise ConfigError(f"unknown option(s) {', '.join(unknown)}", key=key)
    return {k: entry[k] for k in allowed if k in entry}


def _rating(entry: dict, base: Path, key: str):
    kind = entry.get("backend")
    if kind == "mock-oracle":
        from ..imagedir import load_pixels_by_id

        opts = _options(entry, ("name", "references", "metric", "scale", "saturation"), key)
        if "references" not in opts or "name" not in opts:
            raise ConfigError("mock-oracle needs 'name' and 'references'", key=key)
        refs = load_pixels_by_id(base / opts.pop("references"))
        return MockOracleRater(opts.pop("name"), refs, **opts)
    if kind == "http":
        opts = _options(entry, ("name", "url", "question", "timeout", "max_in_flight"), key)
        return HttpRatingBackend(opts.pop("name"), opts.pop("url"), **opts)
    raise ConfigError(f"unknown rating backend {kind!r}", key=key)


def _caption(entry: dict, base: Path, key: str):
    kind = entry.get("backend")
    if kind == "mock":
        opts = _options(entry, ("name", "scenes"), key)
        if "scenes" in opts:
            try:
                opts["scenes"] = json.loads((base / opts["scenes"]).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise LoadError(f"cannot read caption scenes: {exc}") from None
        return MockCaptioner(**opts)
    if kind == "http":
        opts = _options(entry, ("name", "url", "timeout", "max_in_flight"), key)
        return HttpCaptionBackend(opts.pop("name"), opts.pop("url"), **opts)
    raise ConfigError(f"unknown caption backend {kind!r}", key=key)


def _rewrite(entry: dict, base: Path, key: str):
    kind = entry.get("backend")
    if kind == "mock":
        return MockRewriter(**_options(entry, ("name", "mode"), key))
    if kind == "http":
        opts = _options(entry, ("name", "url", "timeout", "max_in_flight"), key)
        return HttpRewriteBackend(opts.pop("name"), opts.pop("url"), **opts)
    raise ConfigError(f"unknown rewrite backend {kind!r}", key=key)


def _embed(entry: dict, base: Path, key: str):
    kinds = {"mock-clip": PixelStatEncoder, "mock-tag": TagBasisEncoder}
    cls = kinds.get(entry.get("backend"))
    if cls is None:
        raise ConfigError(f"unknown embed backend {entry.get('backend')!r}", key=key)
    opts = _options(entry, ("name", "dim", "prompt_width", "seed"), key)
    if cls is TagBasisEncoder:
        opts.setdefault("name", "mock-tag")
    return cls(**opts)


def _feature(entry: dict, base: Path, key: str):
    if entry.get("backend") != "mock-pool":
        raise ConfigError(f"unknown feature backend {entry.get('backend')!r}", key=key)
    return PooledRGBExtractor(**_options(entry, ("name", "patch"), key))


_BUILDERS = {"rating": _rating, "caption": _caption, "rewrite": _rewrite, "embed": _embed,
             "feature": _feature}


def registry_from_spec(spec: dict, base=".") -> BackendRegistry:
    if not isinstance(spec, dict):
        raise ConfigError("experts file must hold a JSON object", key="experts")
    unknown = sorted(set(spec) - set(_BUILDERS))
    if unknown:
        raise ConfigError(f"unknown backend kind(s) {', '.join(unknown)}", key="experts")
    registry = BackendRegistry()
    base = Path(base)
    for kind, build in _BUILDERS.items():
        entries = spec.get(kind, [])
        for k, entry in enumerate(entries if isinstance(entries, list) else [entries]):
            key = f"{kind}[{k}]"
            if not isinstance(entry, dict):
                raise ConfigError("backend entry must be an object", key=key)
            try:
                registry.register(build(entry, base, key))
            except TypeError as exc:
                raise ConfigError(str(exc), key=key) from None
    return registry


def load_registry(path) -> BackendRegistry:
    path = Path(path)
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read experts file: {exc}", key="experts") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"experts file is not JSON ({exc})", key="experts") from None
    return registry_from_spec(spec, path.parent)
