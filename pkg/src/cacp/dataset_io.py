"""Reading, annotating and writing datasets in the three task layouts.

Layouts (relative to a dataset root):

* classification: ``<class>/<image>``
* detection: ``images/<image>`` plus COCO-style ``annotations.json``
* segmentation: ``images/<image>``, ``masks/<stem>.png`` (class indices) and
  ``classes.json`` mapping index -> class name

Written datasets additionally carry ``manifest.tsv`` (one
``relative_path<TAB>sha256`` row per image) and ``augmentations.jsonl``
(one provenance record per synthetic image).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np
from PIL import Image

from cacp.errors import ConfigError, LayoutMismatchError, MalformedAnnotationError
from cacp.geometry import BBox, mask_bbox

logger = logging.getLogger(__name__)

TASKS = ("classification", "detection", "segmentation")
IMAGE_EXTENSIONS = frozenset({".png", ".jpg", ".jpeg"})
DEFAULT_KEEP_THRESHOLD = 0.2

MANIFEST_NAME = "manifest.tsv"
RECORDS_NAME = "augmentations.jsonl"
JOURNAL_NAME = ".cacp-journal.jsonl"
COCO_NAME = "annotations.json"
CLASSES_NAME = "classes.json"


def check_task(task: str) -> str:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    return task


@dataclass
class AnnotationSet:
    task: str
    class_tag: Optional[str] = None
    boxes: list[BBox] = field(default_factory=list)
    index_mask: Optional[np.ndarray] = None
    class_map: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        check_task(self.task)
        if self.task == "classification" and not self.class_tag:
            raise ValueError("classification annotations need a class_tag")
        if self.task == "segmentation" and self.index_mask is None:
            raise ValueError("segmentation annotations need an index_mask")

    def __eq__(self, other) -> bool:
        if not isinstance(other, AnnotationSet):
            return NotImplemented
        if (self.task, self.class_tag, list(self.boxes), dict(self.class_map)) != (
            other.task, other.class_tag, list(other.boxes), dict(other.class_map)
        ):
            return False
        if self.index_mask is None or other.index_mask is None:
            return self.index_mask is None and other.index_mask is None
        return self.index_mask.shape == other.index_mask.shape and bool(np.array_equal(self.index_mask, other.index_mask))

    def within(self, width: int, height: int) -> bool:
        if any(not b.within(width, height) for b in self.boxes):
            return False
        return self.index_mask is None or self.index_mask.shape == (height, width)

    def copy(self) -> "AnnotationSet":
        return replace(
            self,
            boxes=list(self.boxes),
            index_mask=None if self.index_mask is None else self.index_mask.copy(),
            class_map=dict(self.class_map),
        )


@dataclass
class AugmentationRecord:
    output_path: str
    base_path: str
    donor_path: str
    donor_category: str
    caption: str
    chosen_by: dict
    placement: dict
    prompt_mode: str
    n_points: int
    seed: int
    prompt_seed: int = 0
    variant: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class DatasetItem:
    """One image plus its annotations; ``name`` is the image path relative to the dataset root."""

    name: str
    image: np.ndarray
    annotations: AnnotationSet
    record: Optional[AugmentationRecord] = None

    @property
    def stem(self) -> str:
        return Path(self.name).stem


# -- image helpers -----------------------------------------------------------


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB")).copy()


def encode_png(array: np.ndarray) -> bytes:
    import io

    if array.ndim == 2 and array.dtype != np.uint8:
        img = Image.fromarray(array.astype(np.uint16))
    else:
        img = Image.fromarray(np.ascontiguousarray(array.astype(np.uint8)))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedAnnotationError(path, exc.msg, line=exc.lineno) from exc


def _json_line_of(path: Path, needle: str) -> Optional[int]:
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if needle in line:
            return lineno
    return None


# -- loading -----------------------------------------------------------------


def load_dataset(root: Path, task: str) -> Iterator[DatasetItem]:
    """Yield items in deterministic (sorted) order for the given task layout."""
    root = Path(root)
    check_task(task)
    if not root.is_dir():
        raise LayoutMismatchError(f"dataset root {root} does not exist")
    if task == "classification":
        yield from _load_classification(root)
    elif task == "detection":
        yield from _load_detection(root)
    else:
        yield from _load_segmentation(root)


def _load_classification(root: Path) -> Iterator[DatasetItem]:
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")):
        for path in _list_images(class_dir):
            yield DatasetItem(
                f"{class_dir.name}/{path.name}", read_image(path), AnnotationSet("classification", class_tag=class_dir.name)
            )


def parse_coco(path: Path) -> tuple[dict[str, dict], dict[str, list[BBox]]]:
    """Return ``(image records by file name, boxes by file name)`` from a COCO-style file."""
    data = _read_json(path)
    try:
        categories = {int(c["id"]): str(c["name"]) for c in data.get("categories", [])}
        images = {int(im["id"]): im for im in data["images"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedAnnotationError(path, f"bad images/categories section: {exc}") from exc
    by_name = {str(im["file_name"]): im for im in images.values()}
    boxes: dict[str, list[BBox]] = {name: [] for name in by_name}
    for ann in data.get("annotations", []):
        ann_id = ann.get("id")
        try:
            image = images[int(ann["image_id"])]
            x, y, w, h = (float(v) for v in ann["bbox"])
            label = categories[int(ann["category_id"])]
            score = float(ann.get("score", 1.0))
            x0, y0 = int(np.floor(x)), int(np.floor(y))
            x1, y1 = int(np.ceil(x + w)), int(np.ceil(y + h))
            width, height = image.get("width"), image.get("height")
            if width is not None and height is not None:
                x1, y1 = min(x1, int(width)), min(y1, int(height))
            box = BBox(x0, y0, x1, y1, label, score)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedAnnotationError(
                path, f"annotation id={ann_id}: {exc}", line=_json_line_of(path, f'"id": {ann_id}')
            ) from exc
        boxes[str(image["file_name"])].append(box)
    return by_name, boxes


def _load_detection(root: Path) -> Iterator[DatasetItem]:
    ann_path = root / COCO_NAME
    if not ann_path.exists():
        raise LayoutMismatchError(f"detection layout needs {ann_path}")
    records, boxes = parse_coco(ann_path)
    files = {p.name: p for p in _list_images(root / "images")}
    missing = sorted(set(records) - set(files))
    if missing:
        raise MalformedAnnotationError(ann_path, f"annotated image missing from images/: {missing[0]}")
    for name in sorted(files):
        image = read_image(files[name])
        h, w = image.shape[:2]
        for box in boxes.get(name, []):
            if not box.within(w, h):
                raise MalformedAnnotationError(ann_path, f"box {box.as_tuple()} outside {name} ({w}x{h})")
        yield DatasetItem(f"images/{name}", image, AnnotationSet("detection", boxes=list(boxes.get(name, []))))


def read_class_map(path: Path) -> dict[int, str]:
    data = _read_json(path)
    try:
        return {int(k): str(v) for k, v in sorted(data.items(), key=lambda kv: int(kv[0]))}
    except (AttributeError, ValueError) as exc:
        raise MalformedAnnotationError(path, f"class map must map integer indices to names: {exc}") from exc


def read_index_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode in ("L", "P", "I;16", "I"):
            return np.asarray(img).astype(np.int64)
        raise MalformedAnnotationError(path, f"mask must be single-channel, got mode {img.mode}")


def _load_segmentation(root: Path) -> Iterator[DatasetItem]:
    classes_path = root / CLASSES_NAME
    if not classes_path.exists():
        raise LayoutMismatchError(f"segmentation layout needs {classes_path}")
    class_map = read_class_map(classes_path)
    for path in _list_images(root / "images"):
        mask_path = root / "masks" / f"{path.stem}.png"
        if not mask_path.exists():
            raise MalformedAnnotationError(mask_path, "missing mask for image")
        image = read_image(path)
        mask = read_index_mask(mask_path)
        if mask.shape != image.shape[:2]:
            raise MalformedAnnotationError(mask_path, f"mask {mask.shape} does not match image {image.shape[:2]}")
        unknown = set(np.unique(mask).tolist()) - set(class_map)
        if unknown:
            raise MalformedAnnotationError(mask_path, f"indices {sorted(unknown)} not in {CLASSES_NAME}")
        yield DatasetItem(
            f"images/{path.name}", image, AnnotationSet("segmentation", index_mask=mask, class_map=dict(class_map))
        )


# -- annotation propagation -------------------------------------------------


def visible_fraction(box: BBox, pasted_mask: np.ndarray) -> float:
    covered = int(np.count_nonzero(pasted_mask[box.y_min:box.y_max, box.x_min:box.x_max]))
    return (box.area - covered) / box.area


def class_index(class_map: dict[int, str], name: str) -> tuple[int, dict[int, str]]:
    """Index of ``name`` in ``class_map``, appending it (max + 1) if new."""
    for idx, existing in class_map.items():
        if existing == name:
            return idx, class_map
    idx = max(class_map, default=0) + 1 if class_map else 0
    extended = dict(class_map)
    extended[idx] = name
    return idx, extended


def propagate_annotations(base_ann: AnnotationSet, result, keep_threshold: float = DEFAULT_KEEP_THRESHOLD) -> AnnotationSet:
    """Update ``base_ann`` for the object pasted in ``result``.

    Detection: boxes whose visible fraction drops below ``keep_threshold``
    are removed (never shrunk) and the tight box of the paste is appended.
    Segmentation: pasted pixels take the donor's class index.
    Classification: unchanged.
    """
    pasted = result.pasted_mask.astype(bool)
    out = base_ann.copy()
    if base_ann.task == "detection":
        kept = [b for b in base_ann.boxes if visible_fraction(b, pasted) >= keep_threshold]
        new_box = mask_bbox(pasted, label=result.donor_category)
        out.boxes = kept + ([new_box] if new_box is not None else [])
    elif base_ann.task == "segmentation":
        if base_ann.index_mask.shape != pasted.shape:
            raise ValueError("pasted mask and index mask dimensions differ")
        idx, out.class_map = class_index(base_ann.class_map, result.donor_category)
        out.index_mask[pasted] = idx
    return out


def segmentation_boxes(ann: AnnotationSet, background: Sequence[str] = ("background", "bg")) -> list[BBox]:
    """Per-class bounding boxes of a segmentation mask, skipping index 0 and background names."""
    if ann.index_mask is None:
        return []
    boxes = []
    for idx, name in sorted(ann.class_map.items()):
        if idx == 0 or name.lower() in background:
            continue
        box = mask_bbox(ann.index_mask == idx, label=name)
        if box is not None:
            boxes.append(box)
    return boxes


# -- partition ----------------------------------------------------------------


def parse_fraction(value: Union[str, int, Fraction]) -> int:
    """Denominator ``n`` of a ``1/n`` fraction given as "1/4", 4 or Fraction(1, 4)."""
    if isinstance(value, str):
        text = value.strip()
        if "/" in text:
            num, den = text.split("/", 1)
            if num.strip() != "1":
                raise ConfigError(f"fraction must have the form 1/n, got {value!r}")
            text = den
        try:
            n = int(text)
        except ValueError:
            raise ConfigError(f"bad fraction {value!r}") from None
    elif isinstance(value, Fraction):
        if value.numerator != 1:
            raise ConfigError(f"fraction must have the form 1/n, got {value}")
        n = value.denominator
    else:
        n = int(value)
    if n < 1:
        raise ConfigError(f"fraction denominator must be >= 1, got {n}")
    return n


def select_partition(items: Sequence, fraction, seed: int) -> tuple[list, list]:
    """Split ``items`` into (augment, passthrough) with ``round(len / n)`` augmented.

    Halves round up.  Both parts keep the input order.
    """
    n = parse_fraction(fraction)
    items = list(items)
    count = (2 * len(items) + n) // (2 * n)
    chosen = set(np.random.default_rng(seed).permutation(len(items))[:count].tolist())
    augment = [it for i, it in enumerate(items) if i in chosen]
    passthrough = [it for i, it in enumerate(items) if i not in chosen]
    return augment, passthrough


# -- writing ------------------------------------------------------------------


def output_name(name: str) -> str:
    """Written images are always PNG."""
    return str(Path(name).with_suffix(".png").as_posix())


class DatasetWriter:
    """Incremental writer producing the layout ``load_dataset`` reads back.

    Every ``add`` writes the item's files and appends one line to a journal;
    ``manifest.tsv`` and ``augmentations.jsonl`` grow alongside so an
    interrupted run leaves a valid partial manifest.  ``finalize`` writes
    the task annotation files and removes the journal.  With
    ``resume=True`` an existing journal is replayed and its items are
    reported by ``completed``.
    """

    def __init__(self, out_dir: Path, task: str, resume: bool = False):
        self.out_dir = Path(out_dir)
        self.task = check_task(task)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.journal_path = self.out_dir / JOURNAL_NAME
        self.entries: list[dict] = []
        self.class_map: dict[int, str] = {}
        if resume and self.journal_path.exists():
            self._replay_journal()
        else:
            for name in (JOURNAL_NAME, MANIFEST_NAME, RECORDS_NAME):
                (self.out_dir / name).unlink(missing_ok=True)
        self._rewrite_indexes()
        self._journal = open(self.journal_path, "a", encoding="utf-8")

    @property
    def completed(self) -> set[str]:
        """Sources whose every output has been written."""
        return {e["source"] for e in self.entries}

    def _replay_journal(self) -> None:
        for line in self.journal_path.read_text(encoding="utf-8").splitlines():
            try:
                entry = json.loads(line)
            except json.JSONDecodeError:
                logger.warning("dropping torn journal line in %s", self.journal_path)
                break
            path = self.out_dir / entry["path"]
            if not path.exists() or sha256_file(path) != entry["sha256"]:
                logger.warning("journal entry %s has no matching file; it will be regenerated", entry["path"])
                break
            self.entries.append(entry)
        if self.entries:
            last = self.entries[-1]["source"]
            done = sum(1 for e in self.entries if e["source"] == last)
            if done < self.entries[-1].get("group_size", 1):
                self.entries = [e for e in self.entries if e["source"] != last]
        if self.task == "segmentation":
            for entry in self.entries:
                self.class_map.update({int(k): v for k, v in entry["annotations"]["class_map"].items()})
        with open(self.journal_path, "w", encoding="utf-8") as fh:
            for entry in self.entries:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def _rewrite_indexes(self) -> None:
        manifest = "".join(f"{e['path']}\t{e['sha256']}\n" for e in self.entries)
        records = "".join(json.dumps(e["record"], sort_keys=True) + "\n" for e in self.entries if e["record"])
        (self.out_dir / MANIFEST_NAME).write_text(manifest, encoding="utf-8")
        (self.out_dir / RECORDS_NAME).write_text(records, encoding="utf-8")

    def _merge_class_map(self, ann: AnnotationSet) -> np.ndarray:
        """Remap an item's mask into the dataset-wide class map (by class name)."""
        by_name = {name: idx for idx, name in self.class_map.items()}
        lookup = {}
        for idx, name in sorted(ann.class_map.items()):
            if name in by_name:
                lookup[idx] = by_name[name]
            elif idx not in self.class_map:
                self.class_map[idx] = name
                by_name[name] = idx
                lookup[idx] = idx
            else:
                new = max(self.class_map) + 1
                self.class_map[new] = name
                by_name[name] = new
                lookup[idx] = new
        mask = ann.index_mask
        if all(k == v for k, v in lookup.items()):
            return mask
        remapped = mask.copy()
        for old, new in lookup.items():
            remapped[mask == old] = new
        return remapped

    def _write_bytes(self, rel: str, data: bytes) -> str:
        path = self.out_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    def add(self, item: DatasetItem, source: Optional[str] = None, group_size: int = 1) -> tuple[str, str]:
        """Write one item; returns its manifest row ``(relative_path, sha256)``.

        ``source`` names the input the item came from; ``group_size`` is how
        many outputs that source produces, so a resume can tell whether a
        source was finished.
        """
        rel = output_name(item.name)
        digest = self._write_bytes(rel, encode_png(item.image))
        ann = item.annotations
        if ann.task != self.task:
            raise ValueError(f"item task {ann.task} does not match writer task {self.task}")
        if self.task == "classification":
            payload = {"class_tag": ann.class_tag}
        elif self.task == "detection":
            payload = {"boxes": [[*b.as_tuple(), b.label, b.score] for b in ann.boxes]}
        else:
            mask = self._merge_class_map(ann)
            self._write_bytes(f"masks/{Path(rel).stem}.png", encode_png(mask if mask.max(initial=0) > 255 else mask.astype(np.uint8)))
            payload = {"class_map": {str(k): v for k, v in sorted(self.class_map.items())}}
        record = None
        if item.record is not None:
            record = asdict(replace(item.record, output_path=rel))
        entry = {
            "source": source or item.name,
            "group_size": group_size,
            "path": rel,
            "sha256": digest,
            "size": [int(item.image.shape[1]), int(item.image.shape[0])],
            "annotations": payload,
            "record": record,
        }
        self.entries.append(entry)
        self._journal.write(json.dumps(entry, sort_keys=True) + "\n")
        self._journal.flush()
        with open(self.out_dir / MANIFEST_NAME, "a", encoding="utf-8") as fh:
            fh.write(f"{rel}\t{digest}\n")
        if record is not None:
            with open(self.out_dir / RECORDS_NAME, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        return rel, digest

    def finalize(self) -> list[tuple[str, str]]:
        self._journal.close()
        if self.task == "detection":
            self._write_coco()
        elif self.task == "segmentation":
            classes = {str(k): v for k, v in sorted(self.class_map.items())}
            (self.out_dir / CLASSES_NAME).write_text(json.dumps(classes, indent=1, sort_keys=False) + "\n", encoding="utf-8")
        self._rewrite_indexes()
        self.journal_path.unlink(missing_ok=True)
        return [(e["path"], e["sha256"]) for e in self.entries]

    def _write_coco(self) -> None:
        names = sorted({box[4] for e in self.entries for box in e["annotations"]["boxes"]})
        cat_ids = {name: i for i, name in enumerate(names, start=1)}
        images, annotations = [], []
        for image_id, entry in enumerate(self.entries, start=1):
            width, height = entry["size"]
            images.append({"id": image_id, "file_name": Path(entry["path"]).name, "width": width, "height": height})
            for x0, y0, x1, y1, label, score in entry["annotations"]["boxes"]:
                annotations.append(
                    {
                        "id": len(annotations) + 1,
                        "image_id": image_id,
                        "category_id": cat_ids[label],
                        "bbox": [x0, y0, x1 - x0, y1 - y0],
                        "area": (x1 - x0) * (y1 - y0),
                        "iscrowd": 0,
                        "score": score,
                    }
                )
        coco = {
            "images": images,
            "annotations": annotations,
            "categories": [{"id": i, "name": n} for n, i in cat_ids.items()],
        }
        (self.out_dir / COCO_NAME).write_text(json.dumps(coco, indent=1) + "\n", encoding="utf-8")


def write_dataset(items: Iterable[DatasetItem], out_dir: Path, task: str) -> list[tuple[str, str]]:
    """Write ``items`` in the task layout; returns the manifest rows."""
    writer = DatasetWriter(out_dir, task)
    for item in items:
        writer.add(item)
    return writer.finalize()


def read_manifest(out_dir: Path) -> list[tuple[str, str]]:
    path = Path(out_dir) / MANIFEST_NAME
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise MalformedAnnotationError(path, "expected 'relative_path<TAB>sha256'", line=lineno)
        rows.append((parts[0], parts[1]))
    return rows


def read_records(out_dir: Path) -> list[dict]:
    path = Path(out_dir) / RECORDS_NAME
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]
