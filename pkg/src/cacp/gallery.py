"""Donor gallery: a folder-per-category image catalog plus object scale statistics.

The ratio table records, for every ordered pair of categories seen together
in one gallery image, the smallest and largest observed bounding-box area
ratio ``area(obj1) / area(obj2)``.  Ratios are kept as exact fractions of
integer pixel areas so that the reciprocal identity between ``(a, b)`` and
``(b, a)`` holds exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from cacp.errors import EmptyGalleryError, MalformedAnnotationError, UnknownCategoryError
from cacp.geometry import BBox

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = frozenset({".png", ".jpg", ".jpeg"})
INDEX_HEADER = "CACP-INDEX v1"
SIDECAR_SUFFIX = ".boxes.json"

# donor area as a fraction of base-image area, used when a pair was never observed
FALLBACK_INTERVAL = (0.05, 0.30)


@dataclass(frozen=True)
class GalleryEntry:
    image_path: Path
    category: str
    cached_boxes: tuple[BBox, ...] = ()

    @property
    def cached_bbox(self) -> Optional[BBox]:
        """Best cached box of this entry's own category, if a sidecar provided one."""
        own = [b for b in self.cached_boxes if b.label == self.category]
        if not own:
            return None
        return sorted(own, key=lambda b: (-b.score, b.y_min, b.x_min))[0]


@dataclass
class GalleryIndex:
    root: Path
    entries: dict[str, list[GalleryEntry]]

    @property
    def categories(self) -> list[str]:
        return list(self.entries)

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def all_entries(self) -> list[GalleryEntry]:
        return [e for cat in self.entries for e in self.entries[cat]]

    def save(self, path: Path) -> Path:
        """Write the ``CACP-INDEX v1`` cache: ``category TAB relative_path`` lines."""
        path = Path(path)
        lines = [INDEX_HEADER]
        for entry in self.all_entries():
            rel = entry.image_path.relative_to(self.root).as_posix()
            lines.append(f"{entry.category}\t{rel}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path, root: Path) -> "GalleryIndex":
        path, root = Path(path), Path(root)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != INDEX_HEADER:
            raise MalformedAnnotationError(path, f"expected header {INDEX_HEADER!r}", line=1)
        entries: dict[str, list[GalleryEntry]] = {}
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise MalformedAnnotationError(path, "expected 'category<TAB>relative_path'", line=lineno)
            image_path = root / parts[1]
            entries.setdefault(parts[0], []).append(
                GalleryEntry(image_path, parts[0], read_sidecar(image_path))
            )
        if not entries:
            raise EmptyGalleryError(f"index {path} lists no images")
        return cls(root, entries)


def is_image_file(path: Path) -> bool:
    return path.is_file() and path.suffix.lower() in IMAGE_EXTENSIONS


def sidecar_path(image_path: Path) -> Path:
    return image_path.with_name(image_path.name + SIDECAR_SUFFIX)


def read_sidecar(image_path: Path) -> tuple[BBox, ...]:
    """Boxes from ``<image>.boxes.json`` (``{"boxes": [{"bbox": [x0,y0,x1,y1], "label": ...}]}``)."""
    path = sidecar_path(Path(image_path))
    if not path.exists():
        return ()
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        return tuple(
            BBox(*b["bbox"], label=str(b["label"]), score=float(b.get("score", 1.0))) for b in data["boxes"]
        )
    except json.JSONDecodeError as exc:
        raise MalformedAnnotationError(path, exc.msg, line=exc.lineno) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedAnnotationError(path, f"bad box record: {exc}") from exc


def write_sidecar(image_path: Path, boxes: Iterable[BBox]) -> Path:
    path = sidecar_path(Path(image_path))
    payload = {"boxes": [{"bbox": list(b.as_tuple()), "label": b.label, "score": b.score} for b in boxes]}
    path.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    return path


def build_index(root_dir: Path) -> GalleryIndex:
    """Catalog ``root/<category>/**/<image>``; categories without images are skipped."""
    root = Path(root_dir)
    if not root.is_dir():
        raise EmptyGalleryError(f"gallery root {root} is not a directory")
    entries: dict[str, list[GalleryEntry]] = {}
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        images = sorted((p for p in cat_dir.rglob("*") if is_image_file(p)), key=lambda p: p.relative_to(cat_dir).as_posix())
        if images:
            entries[cat_dir.name] = [GalleryEntry(p, cat_dir.name, read_sidecar(p)) for p in images]
    if not entries:
        raise EmptyGalleryError(f"no category under {root} contains images")
    return GalleryIndex(root, entries)


def sample_donor(index: GalleryIndex, category: str, rng_seed: int) -> GalleryEntry:
    if category not in index.entries:
        raise UnknownCategoryError(category)
    pool = index.entries[category]
    return pool[int(np.random.default_rng(rng_seed).integers(len(pool)))]


# -- ratio statistics --------------------------------------------------------


class RatioRecord(NamedTuple):
    obj1: str
    obj2: str
    ratio: Fraction


@dataclass
class RatioStats:
    ratio_min: Fraction
    ratio_max: Fraction
    count: int = 1


class RatioInterval(NamedTuple):
    ratio_min: float
    ratio_max: float
    fallback: bool = False


def ratio_records(boxes: Sequence[BBox]) -> list[RatioRecord]:
    """One record per ordered pair of boxes with distinct labels."""
    records = []
    for i, a in enumerate(boxes):
        for j, b in enumerate(boxes):
            if i != j and a.label != b.label:
                records.append(RatioRecord(a.label, b.label, Fraction(a.area, b.area)))
    return records


@dataclass
class RatioTable:
    pairs: dict[tuple[str, str], RatioStats] = field(default_factory=dict)

    def add(self, record: RatioRecord) -> None:
        key = (record.obj1, record.obj2)
        stats = self.pairs.get(key)
        if stats is None:
            self.pairs[key] = RatioStats(record.ratio, record.ratio, 1)
        else:
            stats.ratio_min = min(stats.ratio_min, record.ratio)
            stats.ratio_max = max(stats.ratio_max, record.ratio)
            stats.count += 1

    def add_boxes(self, boxes: Sequence[BBox]) -> None:
        for record in ratio_records(boxes):
            self.add(record)

    def merge(self, other: "RatioTable") -> "RatioTable":
        """Fold ``other`` into this table (min/max fold is associative and commutative)."""
        for key, stats in other.pairs.items():
            mine = self.pairs.get(key)
            if mine is None:
                self.pairs[key] = RatioStats(stats.ratio_min, stats.ratio_max, stats.count)
            else:
                mine.ratio_min = min(mine.ratio_min, stats.ratio_min)
                mine.ratio_max = max(mine.ratio_max, stats.ratio_max)
                mine.count += stats.count
        return self

    def get(self, obj1: str, obj2: str) -> Optional[RatioStats]:
        return self.pairs.get((obj1, obj2))

    def __len__(self) -> int:
        return len(self.pairs)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RatioTable):
            return NotImplemented
        return {k: (v.ratio_min, v.ratio_max, v.count) for k, v in self.pairs.items()} == {
            k: (v.ratio_min, v.ratio_max, v.count) for k, v in other.pairs.items()
        }

    def save(self, path: Path) -> Path:
        """Write ``obj1 TAB obj2 TAB ratio_min TAB ratio_max TAB count`` lines sorted by pair.

        Ratios are written as ``repr(float)``; loading re-derives the reverse
        direction of every pair from its forward row so the reciprocal
        identity survives the round trip exactly.
        """
        path = Path(path)
        lines = [
            f"{a}\t{b}\t{float(s.ratio_min)!r}\t{float(s.ratio_max)!r}\t{s.count}"
            for (a, b), s in sorted(self.pairs.items())
        ]
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path) -> "RatioTable":
        path = Path(path)
        table = cls()
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line:
                continue
            parts = line.split("\t")
            try:
                a, b, lo, hi, count = parts
                stats = RatioStats(Fraction(float(lo)), Fraction(float(hi)), int(count))
            except ValueError as exc:
                raise MalformedAnnotationError(path, f"bad ratio record: {exc}", line=lineno) from exc
            if not 0 < stats.ratio_min <= stats.ratio_max:
                raise MalformedAnnotationError(path, "ratio interval must satisfy 0 < min <= max", line=lineno)
            if a < b or (b, a) not in table.pairs:
                table.pairs[(a, b)] = stats
            if a < b:
                table.pairs[(b, a)] = RatioStats(1 / stats.ratio_max, 1 / stats.ratio_min, stats.count)
        return table


def entry_boxes(entry: GalleryEntry, detector) -> list[BBox]:
    """Sidecar boxes when present, otherwise detector output on the image."""
    if entry.cached_boxes:
        return list(entry.cached_boxes)
    from cacp.dataset_io import read_image

    return detector.detect(read_image(entry.image_path))


def build_ratio_table(index: GalleryIndex, detector, entries: Optional[Iterable[GalleryEntry]] = None) -> RatioTable:
    """Fold pairwise area ratios over every gallery image into a table.

    Images whose detection fails are logged and skipped.
    """
    table = RatioTable()
    for entry in index.all_entries() if entries is None else entries:
        try:
            boxes = entry_boxes(entry, detector)
        except Exception as exc:  # detection failures skip the image
            logger.warning("skipping %s in ratio statistics: %s", entry.image_path, exc)
            continue
        table.add_boxes(boxes)
    return table


def ratio_interval(
    table: RatioTable, obj1: Optional[str], obj2: Optional[str], fallback: tuple[float, float] = FALLBACK_INTERVAL
) -> RatioInterval:
    """Observed ``(ratio_min, ratio_max)`` for the pair, or the flagged fallback."""
    stats = table.get(obj1, obj2) if obj1 is not None and obj2 is not None else None
    if stats is None:
        return RatioInterval(float(fallback[0]), float(fallback[1]), True)
    return RatioInterval(float(stats.ratio_min), float(stats.ratio_max), False)
