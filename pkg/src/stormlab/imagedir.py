"""Directory layouts shared by the command-line tools.

An image directory holds images at the top level (id = file stem, no weather
tag) and/or in ``clear/``, ``rain/``, ``haze/`` and ``snow/`` subdirectories
(id = ``<weather>/<stem>``, tagged with that weather). Other subdirectories
are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .core import ImageSample, LabeledPair, Source, Weather, list_images, read_image, write_png16
from .errors import DomainError, LoadError


@dataclass
class ImageDirScan:
    samples: list = field(default_factory=list)
    errors: list = field(default_factory=list)  # (relative path, message)


def image_paths(directory) -> list[tuple[str, Weather | None, Path]]:
    """(id, tag, path) for every image, sorted by id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise LoadError(f"not a directory: {directory}")
    found = [(p.stem, None, p) for p in list_images(directory)]
    for weather in Weather:
        sub = directory / weather.value
        if sub.is_dir():
            found += [(f"{weather.value}/{p.stem}", weather, p) for p in list_images(sub)]
    ids = [i for i, _, _ in found]
    if len(ids) != len(set(ids)):
        raise LoadError(f"duplicate image ids under {directory}")
    return sorted(found, key=lambda t: t[0])


def scan_image_dir(directory, *, source: Source = Source.REAL,
                   default_tag: Weather | None = None) -> ImageDirScan:
    """Read every image; unreadable files are collected rather than raised."""
    scan = ImageDirScan()
    root = Path(directory)
    for image_id, tag, path in image_paths(directory):
        try:
            pixels = read_image(path)
        except DomainError as exc:
            scan.errors.append((path.relative_to(root).as_posix(), str(exc)))
            continue
        scan.samples.append(ImageSample(image_id, pixels, tag or default_tag, source))
    return scan


def load_image_dir(directory, *, source: Source = Source.REAL,
                   default_tag: Weather | None = None) -> list:
    """Like :func:`scan_image_dir` but any unreadable image is an error."""
    scan = scan_image_dir(directory, source=source, default_tag=default_tag)
    if scan.errors:
        path, message = scan.errors[0]
        raise LoadError(f"{len(scan.errors)} unreadable image(s), first {path}: {message}")
    return scan.samples


def load_pixels_by_id(directory) -> dict:
    return {s.id: s.pixels for s in load_image_dir(directory)}


def load_labeled_dir(directory) -> list:
    """Pairs from ``degraded/`` and ``clean/`` subtrees with matching ids."""
    directory = Path(directory)
    degraded = {s.id: s for s in load_image_dir(directory / "degraded", source=Source.SYNTHETIC)}
    clean = load_pixels_by_id(directory / "clean")
    missing = sorted(set(degraded) ^ set(clean))
    if missing:
        raise LoadError(f"labeled ids without a partner: {', '.join(missing)}")
    return [LabeledPair(degraded[i], ImageSample(f"{i}-gt", clean[i], Weather.CLEAR,
                                                 Source.SYNTHETIC))
            for i in sorted(degraded)]


def load_reference_dir(directory) -> dict:
    """Weather -> tagged reference images (subdirectory per class)."""
    refs = {w: [] for w in Weather}
    for sample in load_image_dir(directory, source=Source.SYNTHETIC):
        if sample.weather_tag is None:
            raise LoadError(f"reference image {sample.id} is not in a weather subdirectory")
        refs[sample.weather_tag].append(sample)
    return refs


def write_image_tree(directory, images: dict) -> None:
    """Write id -> pixels as 16-bit PNGs following the id layout."""
    directory = Path(directory)
    for image_id, pixels in images.items():
        path = directory / f"{image_id}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_png16(path, pixels)
