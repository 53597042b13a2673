"""End-to-end orchestration: gallery preparation, augmentation, evaluation and preview."""

from __future__ import annotations

import hashlib
import logging
import math
import threading
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, TextIO

import numpy as np

from cacp import dataset_io as dio
from cacp.backends import Backends, PromptBundle, make_backends
from cacp.compositor import CompositeResult, blend, choose_position, choose_scale, rescale_object, scaled_dims
from cacp.config import RunConfig
from cacp.errors import (
    BackendError,
    CacpError,
    LayoutMismatchError,
    NoObjectFoundError,
)
from cacp.gallery import (
    GalleryEntry,
    GalleryIndex,
    RatioTable,
    build_index,
    build_ratio_table,
    sample_donor,
)
from cacp.geometry import BBox, mask_bbox
from cacp.matching import CategoryEmbeddings, MatchResult, embed_categories, match_category
from cacp.metrics import DetectionMatch, accuracy, ap_per_class, dataset_confusion
from cacp.prompts import build_prompt

logger = logging.getLogger(__name__)

MAX_DONOR_ATTEMPTS = 5
FALLBACK_CATEGORIES = 2
BASE_REF_FRACTION = 0.10
OVERLAY_BOX_COLOUR = (0, 255, 0)
OVERLAY_POINT_COLOUR = (255, 0, 255)


@dataclass
class RunReport:
    images_processed: int = 0
    images_augmented: int = 0
    donors_skipped: int = 0
    donor_failures: int = 0
    images_written: int = 0
    wall_time: float = 0.0
    stage_timings: dict = field(default_factory=lambda: defaultdict(float))

    def as_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["stage_timings"] = dict(self.stage_timings)
        return out


@dataclass
class GalleryResources:
    index: GalleryIndex
    ratio_table: RatioTable
    embeddings: CategoryEmbeddings


@dataclass
class DonorObject:
    entry: GalleryEntry
    category: str
    prompt: PromptBundle
    crop: np.ndarray
    mask: np.ndarray
    prompt_seed: int = 0


@dataclass
class ItemOutcome:
    outputs: list
    augmented: bool
    donor_failures: int = 0
    match: Optional[MatchResult] = None
    donor: Optional[DonorObject] = None
    timings: dict = field(default_factory=dict)


class _Timer:
    def __init__(self):
        self.totals = defaultdict(float)

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] += time.perf_counter() - start


def derive_seed(seed: int, *parts) -> int:
    """Stable 63-bit seed from the run seed and arbitrary labels."""
    digest = hashlib.sha256(repr((int(seed),) + tuple(str(p) for p in parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _backend_call(role: str, fn: Callable, *args):
    try:
        return fn(*args)
    except CacpError:
        raise
    except Exception as exc:
        raise BackendError(f"{role} backend failed: {exc}") from exc


def backends_for(config: RunConfig) -> Backends:
    return make_backends(config.backends, config.model_paths)


# -- gallery ------------------------------------------------------------------


def run_build_gallery(config: RunConfig, backends: Optional[Backends] = None) -> tuple[Path, Path]:
    """Index the gallery and compute its ratio table, writing both files."""
    config.validate(require=("gallery_dir",))
    index = build_index(config.gallery_dir)
    backends = backends or backends_for(config)
    table = build_ratio_table(index, backends.detector)
    index_path = index.save(config.resolved_index_path)
    ratio_path = table.save(config.resolved_ratio_path)
    logger.info("indexed %d images in %d categories; %d ratio pairs", len(index), len(index.categories), len(table))
    return index_path, ratio_path


def load_gallery(config: RunConfig, backends: Backends) -> GalleryResources:
    """Load cached index/ratio files when present, otherwise build them in memory."""
    index_path = config.resolved_index_path
    if index_path.exists():
        index = GalleryIndex.load(index_path, config.gallery_dir)
    else:
        index = build_index(config.gallery_dir)
    ratio_path = config.resolved_ratio_path
    if ratio_path.exists():
        table = RatioTable.load(ratio_path)
    else:
        logger.info("no ratio table at %s; computing it from the gallery", ratio_path)
        table = build_ratio_table(index, backends.detector)
    embeddings = _backend_call("embedder", embed_categories, index.categories, backends.embedder)
    return GalleryResources(index, table, embeddings)


# -- per-image augmentation ----------------------------------------------------


def extract_donor(entry: GalleryEntry, category: str, config: RunConfig, backends: Backends, seed: int) -> DonorObject:
    """Detect, prompt and segment the donor object; raises NoObjectFoundError on failure."""
    donor_image = dio.read_image(entry.image_path)
    prompt = build_prompt(
        donor_image,
        category,
        config.prompt_mode,
        config.n_points,
        backends,
        rng_seed=seed,
        min_sep=config.min_sep,
        box=entry.cached_bbox,
    )
    mask = _backend_call("segmenter", backends.segmenter.segment, donor_image, prompt).astype(bool)
    region = mask_bbox(mask)
    if region is None:
        raise NoObjectFoundError(f"segmenter returned an empty mask for {entry.image_path}")
    crop = donor_image[region.y_min:region.y_max, region.x_min:region.x_max].copy()
    return DonorObject(
        entry, category, prompt, crop, mask[region.y_min:region.y_max, region.x_min:region.x_max].copy(), seed
    )


def reference_object(ann: dio.AnnotationSet, height: int, width: int) -> tuple[float, Optional[str], list[BBox]]:
    """``(base_ref_area, context category, occupied boxes)`` for a base image.

    The largest annotated object anchors the scale; without annotations the
    reference is a tenth of the image area and there is no context category.
    """
    boxes = list(ann.boxes) if ann.task == "detection" else dio.segmentation_boxes(ann)
    if not boxes:
        return BASE_REF_FRACTION * height * width, None, []
    largest = max(boxes, key=lambda b: b.area)
    return float(largest.area), largest.label, boxes


def composite_variant(
    base: dio.DatasetItem, donor: DonorObject, resources: GalleryResources, config: RunConfig, seed: int
) -> CompositeResult:
    H, W = base.image.shape[:2]
    ref_area, context, occupied = reference_object(base.annotations, H, W)
    scale = choose_scale(
        resources.ratio_table,
        donor.category,
        context,
        donor.prompt.box.area,
        ref_area,
        derive_seed(seed, "scale"),
        base_image_area=H * W,
    )
    ch, cw = donor.crop.shape[:2]
    # at least 2x2 after scaling, at most the base image
    scale = max(scale, 2.0 / min(cw, ch))
    new_w, new_h = scaled_dims(cw, ch, scale)
    if new_w > W or new_h > H:
        scale = min(W / cw, H / ch)
    crop, mask = rescale_object(donor.crop, donor.mask, scale)
    crop, mask = crop[:H, :W], mask[:H, :W]
    placement = choose_position(
        occupied,
        (crop.shape[1], crop.shape[0]),
        (W, H),
        config.max_overlap_iou,
        config.max_attempts,
        derive_seed(seed, "position"),
        scale=scale,
    )
    return blend(base.image, crop, mask, placement, donor.category, config.feather_px)


def variant_name(name: str, variant: int) -> str:
    path = Path(name)
    return str(path.with_name(f"{path.stem}_cacp{variant}.png").as_posix())


def find_donor(
    item: dio.DatasetItem, match: MatchResult, resources: GalleryResources, config: RunConfig, backends: Backends
) -> tuple[Optional[DonorObject], int]:
    """Try up to five donors from the matched category, then from the runner-up."""
    categories = [match.chosen] + [s.category for s in match.ranking if s.category != match.chosen]
    failures = 0
    for rank, category in enumerate(categories[:FALLBACK_CATEGORIES]):
        for attempt in range(MAX_DONOR_ATTEMPTS):
            donor_seed = derive_seed(config.seed, item.name, "donor", rank, attempt)
            entry = sample_donor(resources.index, category, donor_seed)
            try:
                return extract_donor(entry, category, config, backends, derive_seed(donor_seed, "prompt")), failures
            except NoObjectFoundError as exc:
                failures += 1
                logger.debug("donor %s rejected: %s", entry.image_path, exc)
    return None, failures


def augment_item(
    item: dio.DatasetItem, resources: GalleryResources, config: RunConfig, backends: Backends
) -> ItemOutcome:
    """All output items for one base image selected for augmentation."""
    timer = _Timer()
    with timer.stage("match"):
        match = match_category(
            item.image,
            resources.index,
            backends.captioner,
            backends.embedder,
            cache=resources.embeddings,
            top_k=config.top_k,
            rng_seed=derive_seed(config.seed, item.name, "match"),
        )
    with timer.stage("prompt+segment"):
        donor, failures = find_donor(item, match, resources, config, backends)
    if donor is None:
        logger.info("no usable donor for %s; passing it through", item.name)
        return ItemOutcome([item], False, failures, match, None, dict(timer.totals))
    outputs = []
    for variant in range(config.variants_per_image):
        vseed = derive_seed(config.seed, item.name, "variant", variant)
        with timer.stage("composite"):
            result = composite_variant(item, donor, resources, config, vseed)
            annotations = dio.propagate_annotations(item.annotations, result, config.keep_threshold)
        name = variant_name(item.name, variant)
        record = dio.AugmentationRecord(
            output_path=name,
            base_path=item.name,
            donor_path=donor.entry.image_path.relative_to(resources.index.root).as_posix(),
            donor_category=donor.category,
            caption=match.base_caption,
            chosen_by=match.summary(),
            placement={
                "scale": result.placement.scale,
                "offset": list(result.placement.offset),
                "attempts": result.placement.attempts,
                "box": list(mask_bbox(result.pasted_mask).as_tuple()) if result.pasted_mask.any() else None,
            },
            prompt_mode=donor.prompt.mode,
            n_points=len(donor.prompt.points),
            seed=vseed,
            prompt_seed=donor.prompt_seed,
            variant=variant,
        )
        outputs.append(dio.DatasetItem(name, result.image, annotations, record))
    return ItemOutcome(outputs, True, failures, match, donor, dict(timer.totals))


def _wrap_backend_errors(fn, *args):
    try:
        return fn(*args)
    except CacpError:
        raise
    except Exception as exc:
        raise BackendError(f"augmentation failed: {exc}") from exc


def run_augment(
    config: RunConfig,
    backends: Optional[Backends] = None,
    backend_factory: Optional[Callable[[], Backends]] = None,
) -> RunReport:
    """Augment a dataset and write it with manifest and provenance records.

    A ``1/n`` share of the base images (chosen by seed) is replaced by
    ``variants_per_image`` composites each; the rest pass through.  Output
    order follows the source dataset, so a run is reproducible byte for byte
    and ``config.resume`` can continue an interrupted run.
    """
    start = time.perf_counter()
    config.validate()
    backend_factory = backend_factory or (lambda: backends_for(config))
    backends = backends or backend_factory()
    report = RunReport()
    resources = load_gallery(config, backends)

    items = list(dio.load_dataset(config.source_dir, config.task))
    augment, _ = dio.select_partition(items, config.fraction, config.seed)
    selected = {it.name for it in augment}
    writer = dio.DatasetWriter(config.output_dir, config.task, resume=config.resume)
    done = writer.completed

    local = threading.local()

    def worker_backends() -> Backends:
        if config.workers == 1:
            return backends
        if not hasattr(local, "backends"):
            local.backends = backend_factory()
        return local.backends

    def process(item: dio.DatasetItem) -> ItemOutcome:
        if item.name not in selected:
            return ItemOutcome([item], False)
        return _wrap_backend_errors(augment_item, item, resources, config, worker_backends())

    pending = [it for it in items if it.name not in done]
    report.images_processed = len(items) - len(pending)
    report.images_augmented = sum(1 for name in done if name in selected)
    if config.workers > 1:
        pool = ThreadPoolExecutor(max_workers=config.workers)
        outcomes: Iterable = pool.map(process, pending)
    else:
        pool = None
        outcomes = map(process, pending)
    try:
        for item, outcome in zip(pending, outcomes):
            t0 = time.perf_counter()
            for out in outcome.outputs:
                writer.add(out, source=item.name, group_size=len(outcome.outputs))
            report.stage_timings["write"] += time.perf_counter() - t0
            for stage, seconds in outcome.timings.items():
                report.stage_timings[stage] += seconds
            report.images_processed += 1
            report.images_augmented += int(outcome.augmented)
            report.donor_failures += outcome.donor_failures
            if item.name in selected and not outcome.augmented:
                report.donors_skipped += 1
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)
    manifest = writer.finalize()
    report.images_written = len(manifest)
    report.wall_time = time.perf_counter() - start
    return report


def replay_record(record: dict, config: RunConfig, backends: Optional[Backends] = None) -> np.ndarray:
    """Recompute the composite image described by one provenance record."""
    config.validate()
    backends = backends or backends_for(config)
    resources = load_gallery(config, backends)
    base = next(it for it in dio.load_dataset(config.source_dir, config.task) if it.name == record["base_path"])
    path = Path(config.gallery_dir) / record["donor_path"]
    entry = next((e for e in resources.index.all_entries() if e.image_path == path), None)
    if entry is None:
        entry = GalleryEntry(path, record["donor_category"])
    donor = extract_donor(entry, record["donor_category"], config, backends, int(record["prompt_seed"]))
    return composite_variant(base, donor, resources, config, int(record["seed"])).image


# -- preview ------------------------------------------------------------------


def draw_prompt_overlay(image: np.ndarray, prompt: PromptBundle, marker_radius: int = 1) -> np.ndarray:
    """Box outline plus one square marker per prompt point."""
    out = image.copy()
    b = prompt.box
    out[b.y_min, b.x_min:b.x_max] = OVERLAY_BOX_COLOUR
    out[b.y_max - 1, b.x_min:b.x_max] = OVERLAY_BOX_COLOUR
    out[b.y_min:b.y_max, b.x_min] = OVERLAY_BOX_COLOUR
    out[b.y_min:b.y_max, b.x_max - 1] = OVERLAY_BOX_COLOUR
    h, w = out.shape[:2]
    for p in prompt.points:
        y0, y1 = max(0, p.y - marker_radius), min(h, p.y + marker_radius + 1)
        x0, x1 = max(0, p.x - marker_radius), min(w, p.x + marker_radius + 1)
        out[y0:y1, x0:x1] = OVERLAY_POINT_COLOUR
    return out


def _dataset_name(config: RunConfig, image_path: Path) -> str:
    image_path = Path(image_path).resolve()
    try:
        rel = image_path.relative_to(Path(config.source_dir).resolve())
    except ValueError:
        return image_path.name
    return rel.as_posix()


def run_preview(
    config: RunConfig, base_image_path: Path, out_dir: Path, backends: Optional[Backends] = None
) -> dict[str, Path]:
    """Dry run on one image: caption, ranking, prompt overlay and first composite."""
    config.validate(require=("gallery_dir",))
    backends = backends or backends_for(config)
    resources = load_gallery(config, backends)
    name = _dataset_name(config, base_image_path)
    item = None
    if config.source_dir is not None and Path(config.source_dir).is_dir():
        try:
            item = next((it for it in dio.load_dataset(config.source_dir, config.task) if it.name == name), None)
        except CacpError:
            item = None
    if item is None:
        image = dio.read_image(base_image_path)
        item = dio.DatasetItem(name, image, _empty_annotations(config.task, image))
    outcome = _wrap_backend_errors(augment_item, item, resources, config, backends)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"caption": out_dir / "caption.txt", "ranking": out_dir / "ranking.tsv"}
    paths["caption"].write_text(outcome.match.base_caption + "\n", encoding="utf-8")
    paths["ranking"].write_text(
        "".join(f"{s.category}\t{s.score!r}\n" for s in outcome.match.ranking), encoding="utf-8"
    )
    if outcome.donor is not None:
        donor_image = dio.read_image(outcome.donor.entry.image_path)
        paths["overlay"] = out_dir / "prompt_overlay.png"
        paths["overlay"].write_bytes(dio.encode_png(draw_prompt_overlay(donor_image, outcome.donor.prompt)))
        paths["composite"] = out_dir / "composite.png"
        paths["composite"].write_bytes(dio.encode_png(outcome.outputs[0].image))
    else:
        logger.warning("no usable donor found; only caption and ranking written")
    return paths


def _empty_annotations(task: str, image: np.ndarray) -> dio.AnnotationSet:
    if task == "classification":
        return dio.AnnotationSet(task, class_tag="unlabeled")
    if task == "segmentation":
        return dio.AnnotationSet(task, index_mask=np.zeros(image.shape[:2], dtype=np.int64), class_map={0: "background"})
    return dio.AnnotationSet(task)


# -- evaluation ---------------------------------------------------------------


def _classification_tags(root: Path) -> dict[str, str]:
    root = Path(root)
    if not root.is_dir():
        raise LayoutMismatchError(f"{root} is not a directory")
    tags = {}
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for path in sorted(p for p in class_dir.iterdir() if p.suffix.lower() in dio.IMAGE_EXTENSIONS):
            if path.name in tags:
                raise LayoutMismatchError(f"image {path.name} appears under two classes in {root}")
            tags[path.name] = class_dir.name
    return tags


def evaluate_classification(pred_dir: Path, truth_dir: Path) -> list[tuple[str, str, float]]:
    pred, truth = _classification_tags(pred_dir), _classification_tags(truth_dir)
    if set(pred) != set(truth):
        raise LayoutMismatchError("prediction and truth sets contain different images")
    names = sorted(truth)
    rows = [("accuracy", "all", accuracy([pred[n] for n in names], [truth[n] for n in names]))]
    for cls in sorted(set(truth.values())):
        members = [n for n in names if truth[n] == cls]
        rows.append(("accuracy", cls, accuracy([pred[n] for n in members], [truth[n] for n in members])))
    return rows


def evaluate_segmentation(pred_dir: Path, truth_dir: Path, absent: str = "one") -> list[tuple[str, str, float]]:
    pred_dir, truth_dir = Path(pred_dir), Path(truth_dir)
    for d in (pred_dir, truth_dir):
        if not (d / dio.CLASSES_NAME).exists() or not (d / "masks").is_dir():
            raise LayoutMismatchError(f"{d} is not a segmentation layout (needs masks/ and {dio.CLASSES_NAME})")
    truth_map = dio.read_class_map(truth_dir / dio.CLASSES_NAME)
    pred_map = dio.read_class_map(pred_dir / dio.CLASSES_NAME)
    by_name = {name: idx for idx, name in truth_map.items()}
    truth_masks = {p.stem: p for p in sorted((truth_dir / "masks").glob("*.png"))}
    pred_masks = {p.stem: p for p in sorted((pred_dir / "masks").glob("*.png"))}
    if set(truth_masks) != set(pred_masks):
        raise LayoutMismatchError("prediction and truth sets contain different masks")

    def pairs():
        for stem in sorted(truth_masks):
            truth = dio.read_index_mask(truth_masks[stem])
            raw = dio.read_index_mask(pred_masks[stem])
            pred = np.full(raw.shape, -1, dtype=np.int64)
            for idx, name in pred_map.items():
                if name in by_name:
                    pred[raw == idx] = by_name[name]
            if pred.shape != truth.shape:
                raise LayoutMismatchError(f"mask {stem}: shape {pred.shape} vs {truth.shape}")
            yield pred, truth

    classes = sorted(truth_map)
    counts = dataset_confusion(pairs(), classes)
    rows = []
    values = []
    for idx in classes:
        c = counts[idx]
        denom = c.tp + c.fp + c.fn
        if denom == 0:
            if absent == "skip":
                continue
            value = 1.0
        else:
            value = c.tp / denom
        values.append(value)
        rows.append(("iou", truth_map[idx], value))
    rows.insert(0, ("miou", "all", float(np.mean(values)) if values else math.nan))
    return rows


def evaluate_detection(pred_dir: Path, truth_dir: Path) -> list[tuple[str, str, float]]:
    pred_path, truth_path = Path(pred_dir) / dio.COCO_NAME, Path(truth_dir) / dio.COCO_NAME
    for p in (pred_path, truth_path):
        if not p.exists():
            raise LayoutMismatchError(f"detection layout needs {p}")
    _, truth_boxes = dio.parse_coco(truth_path)
    _, pred_boxes = dio.parse_coco(pred_path)
    extra = set(pred_boxes) - set(truth_boxes)
    if extra:
        raise LayoutMismatchError(f"predictions for images without ground truth: {sorted(extra)[:3]}")
    matches = [
        DetectionMatch([(b, b.score) for b in pred_boxes.get(name, [])], truth_boxes[name])
        for name in sorted(truth_boxes)
    ]
    per_class = ap_per_class(matches)
    values = [v for v in per_class.values() if not math.isnan(v)]
    rows = [("map50", "all", float(np.mean(values)) if values else math.nan)]
    rows += [("ap50", cls, value) for cls, value in per_class.items()]
    return rows


def run_evaluate(pred_dir: Path, truth_dir: Path, task: str, out: Optional[TextIO] = None) -> list[tuple[str, str, float]]:
    """Compute task metrics and optionally write them as ``metric TAB class TAB value`` lines."""
    dio.check_task(task)
    if task == "classification":
        rows = evaluate_classification(pred_dir, truth_dir)
    elif task == "segmentation":
        rows = evaluate_segmentation(pred_dir, truth_dir)
    else:
        rows = evaluate_detection(pred_dir, truth_dir)
    if out is not None:
        write_report(rows, out)
    return rows


def write_report(rows: Sequence[tuple[str, str, float]], out: TextIO) -> None:
    for metric, cls, value in rows:
        out.write(f"{metric}\t{cls}\t{value:.6f}\n")
