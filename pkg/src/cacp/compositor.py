"""Rescale, place and paste a masked donor object onto a base image."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import cv2
import numpy as np

from cacp.errors import DegenerateScaleError, OutOfBoundsError, PasteTooLargeError
from cacp.gallery import FALLBACK_INTERVAL, RatioTable, ratio_interval
from cacp.geometry import BBox, box_iou, image_hw

DEFAULT_MAX_OVERLAP_IOU = 0.3
DEFAULT_MAX_ATTEMPTS = 20
MIN_PASTE_AREA = 4


@dataclass(frozen=True)
class Placement:
    scale: float
    offset: tuple[int, int]
    attempts: int = 1

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")


@dataclass
class CompositeResult:
    image: np.ndarray
    pasted_mask: np.ndarray
    donor_category: str
    placement: Placement


def scaled_dims(width: int, height: int, scale: float) -> tuple[int, int]:
    return max(1, int(math.floor(width * scale + 0.5))), max(1, int(math.floor(height * scale + 0.5)))


def rescale_object(donor_crop: np.ndarray, donor_mask: np.ndarray, target_scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Resize crop (bilinear) and mask (nearest) by the same factor."""
    if not target_scale > 0:
        raise DegenerateScaleError(f"scale must be positive, got {target_scale}")
    if donor_crop.shape[:2] != donor_mask.shape[:2]:
        raise ValueError("crop and mask dimensions differ")
    h, w = image_hw(donor_crop)
    new_w, new_h = scaled_dims(w, h, target_scale)
    if new_w * new_h < MIN_PASTE_AREA:
        raise DegenerateScaleError(f"scale {target_scale} shrinks {w}x{h} to {new_w}x{new_h}")
    if (new_w, new_h) == (w, h):
        return donor_crop.copy(), donor_mask.astype(bool)
    crop = cv2.resize(donor_crop, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    mask = cv2.resize(donor_mask.astype(np.uint8), (new_w, new_h), interpolation=cv2.INTER_NEAREST).astype(bool)
    return crop, mask


def choose_scale(
    ratio_table: RatioTable,
    donor_cat: str,
    base_context_cat: Optional[str],
    donor_box_area: float,
    base_ref_area: float,
    rng_seed: Optional[int],
    base_image_area: Optional[float] = None,
    fallback: tuple[float, float] = FALLBACK_INTERVAL,
) -> float:
    """Linear scale taking the donor box to a sampled target area.

    A ratio ``r`` is drawn uniformly from the observed interval for
    ``(donor_cat, base_context_cat)`` and the donor is scaled so that its
    box area becomes ``r * base_ref_area``.  For unseen pairs the fallback
    interval is read as a fraction of ``base_image_area`` (when given).
    """
    if donor_box_area <= 0 or base_ref_area <= 0:
        raise ValueError("areas must be positive")
    interval = ratio_interval(ratio_table, donor_cat, base_context_cat, fallback)
    ref = base_image_area if interval.fallback and base_image_area else base_ref_area
    r = np.random.default_rng(rng_seed).uniform(interval.ratio_min, interval.ratio_max)
    return math.sqrt(r * ref / donor_box_area)


def _boxes_of(annotations) -> list[BBox]:
    if annotations is None:
        return []
    return list(getattr(annotations, "boxes", annotations))


def choose_position(
    base_annotations,
    paste_dims: tuple[int, int],
    base_dims: tuple[int, int],
    max_overlap_iou: float = DEFAULT_MAX_OVERLAP_IOU,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    rng_seed: Optional[int] = None,
    scale: float = 1.0,
) -> Placement:
    """Rejection-sample a top-left offset whose box overlaps no annotation too much.

    ``paste_dims`` and ``base_dims`` are ``(width, height)``.  After
    ``max_attempts`` rejections the proposal with the smallest worst-case
    IoU is returned.
    """
    w, h = paste_dims
    W, H = base_dims
    if w > W or h > H:
        raise PasteTooLargeError(f"paste {w}x{h} does not fit base {W}x{H}")
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    boxes = _boxes_of(base_annotations)
    rng = np.random.default_rng(rng_seed)
    best = None
    for attempt in range(1, max_attempts + 1):
        x = int(rng.integers(0, W - w + 1))
        y = int(rng.integers(0, H - h + 1))
        proposal = BBox(x, y, x + w, y + h)
        worst = max((box_iou(proposal, b) for b in boxes), default=0.0)
        if worst <= max_overlap_iou:
            return Placement(scale, (x, y), attempt)
        if best is None or worst < best[0]:
            best = (worst, (x, y))
    return Placement(scale, best[1], max_attempts)


def feather_alpha(mask: np.ndarray, feather_px: float) -> np.ndarray:
    """Per-pixel opacity ramping linearly from the mask edge to 1 at ``feather_px`` inside."""
    mask = mask.astype(bool)
    if feather_px <= 0:
        return mask.astype(np.float64)
    padded = np.pad(mask, 1).astype(np.uint8)
    dist = cv2.distanceTransform(padded, cv2.DIST_L2, 5)[1:-1, 1:-1]
    return np.where(mask, np.clip(dist / float(feather_px), 0.0, 1.0), 0.0)


def blend(
    base: np.ndarray,
    donor_crop: np.ndarray,
    donor_mask: np.ndarray,
    placement: Placement,
    donor_category: str = "",
    feather_px: float = 0,
) -> CompositeResult:
    """Paste ``donor_crop`` through ``donor_mask`` at ``placement.offset``.

    With ``feather_px == 0`` the result is an exact hard paste: donor pixels
    where the translated mask is set, base pixels everywhere else.
    """
    if donor_crop.shape[:2] != donor_mask.shape[:2]:
        raise ValueError("crop and mask dimensions differ")
    H, W = image_hw(base)
    h, w = image_hw(donor_crop)
    x, y = placement.offset
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise OutOfBoundsError(f"paste {w}x{h} at ({x}, {y}) exceeds base {W}x{H}")
    mask = donor_mask.astype(bool)
    out = base.copy()
    region = out[y:y + h, x:x + w]
    if feather_px <= 0:
        region[mask] = donor_crop[mask]
    else:
        alpha = feather_alpha(mask, feather_px)
        if region.ndim == 3:
            alpha = alpha[:, :, None]
        mixed = alpha * donor_crop.astype(np.float64) + (1.0 - alpha) * region.astype(np.float64)
        sel = mask if region.ndim == 2 else np.broadcast_to(mask[:, :, None], region.shape)
        region[sel] = np.rint(mixed).astype(base.dtype)[sel]
    pasted = np.zeros((H, W), dtype=bool)
    pasted[y:y + h, x:x + w] = mask
    return CompositeResult(out, pasted, donor_category, placement)
