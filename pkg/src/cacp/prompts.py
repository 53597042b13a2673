"""Hybrid segmentation prompts: a detector box plus saliency-guided points."""

from __future__ import annotations

from typing import Optional

import numpy as np

from cacp.backends import Heatmap, PromptBundle, PromptPoint
from cacp.errors import ConfigError, NoObjectFoundError
from cacp.geometry import BBox

MODES = ("box_only", "box_plus_random", "box_plus_cam")
MODE_ALIASES = {"box": "box_only", "box+rand": "box_plus_random", "box+cam": "box_plus_cam"}

DEFAULT_MODE = "box_plus_cam"
DEFAULT_N_POINTS = 3
DEFAULT_MIN_SEP = 0.15


def normalize_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ConfigError(f"unknown prompt mode {mode!r}; expected one of {MODES + tuple(MODE_ALIASES)}")
    return mode


def pick_object_box(donor_image: np.ndarray, category: str, detector) -> BBox:
    boxes = [b for b in detector.detect(donor_image, category) if b.label == category]
    if not boxes:
        raise NoObjectFoundError(f"no {category!r} detected in donor image")
    return sorted(boxes, key=lambda b: (-b.score, b.y_min, b.x_min))[0]


def sample_cam_points(heatmap: Heatmap, box: BBox, n: int, min_sep: float = DEFAULT_MIN_SEP) -> list[tuple[int, int]]:
    """Greedy top-value cells inside ``box``, kept at least ``min_sep * diag(box)`` apart.

    Cells are visited by descending heatmap value (ties: smaller y, then x).
    Returns fewer than ``n`` points only when no remaining cell is far
    enough from the ones already taken.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return []
    h, w = heatmap.grid.shape
    if not box.within(w, h):
        raise ValueError(f"box {box.as_tuple()} exceeds heatmap {w}x{h}")
    window = heatmap.grid[box.y_min:box.y_max, box.x_min:box.x_max]
    ys, xs = np.mgrid[box.y_min:box.y_max, box.x_min:box.x_max]
    order = np.lexsort((xs.ravel(), ys.ravel(), -window.ravel()))
    sep_sq = (min_sep * box.diagonal) ** 2
    chosen: list[tuple[int, int]] = []
    for idx in order:
        x, y = int(xs.flat[idx]), int(ys.flat[idx])
        if all((x - cx) ** 2 + (y - cy) ** 2 >= sep_sq for cx, cy in chosen):
            chosen.append((x, y))
            if len(chosen) == n:
                break
    return chosen


def sample_random_points(box: BBox, n: int, rng_seed: Optional[int]) -> list[tuple[int, int]]:
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(rng_seed)
    xs = rng.integers(box.x_min, box.x_max, size=n)
    ys = rng.integers(box.y_min, box.y_max, size=n)
    return [(int(x), int(y)) for x, y in zip(xs, ys)]


def build_prompt(
    donor_image: np.ndarray,
    category: str,
    mode: str,
    n_points: int,
    backends,
    rng_seed: Optional[int] = None,
    min_sep: float = DEFAULT_MIN_SEP,
    box: Optional[BBox] = None,
) -> PromptBundle:
    """Compose a PromptBundle for ``category`` in ``donor_image``.

    ``box`` skips detection (e.g. a cached gallery annotation).
    """
    mode = normalize_mode(mode)
    if not 0 <= n_points <= PromptBundle.MAX_POINTS:
        raise ConfigError(f"n_points must be in [0, {PromptBundle.MAX_POINTS}], got {n_points}")
    if box is None:
        box = pick_object_box(donor_image, category, backends.detector)
    if mode == "box_only":
        points = []
    elif mode == "box_plus_random":
        points = sample_random_points(box, n_points, rng_seed)
    else:
        heatmap = backends.saliency.saliency(donor_image, category)
        points = sample_cam_points(heatmap, box, n_points, min_sep)
    return PromptBundle(box, tuple(PromptPoint(x, y) for x, y in points), mode)
