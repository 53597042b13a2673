"""Bounding boxes and the box/mask helpers every stage needs.

Boxes are half-open pixel rectangles: a box (x_min, y_min, x_max, y_max)
covers columns ``x_min .. x_max - 1`` and rows ``y_min .. y_max - 1``, so its
area is ``(x_max - x_min) * (y_max - y_min)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class BBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int
    label: str = ""
    score: float = 1.0

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            value = getattr(self, name)
            if int(value) != value:
                raise ValueError(f"{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if not (0 <= self.x_min < self.x_max and 0 <= self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    @property
    def center(self) -> tuple[int, int]:
        """Integer pixel closest to the geometric center (rounding down)."""
        return (self.x_min + self.x_max - 1) // 2, (self.y_min + self.y_max - 1) // 2

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.x_min, self.y_min, self.x_max, self.y_max

    def contains_point(self, x: int, y: int) -> bool:
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max

    def within(self, width: int, height: int) -> bool:
        return self.x_max <= width and self.y_max <= height

    def with_label(self, label: str) -> "BBox":
        return replace(self, label=label)

    def to_xywh(self) -> list[int]:
        return [self.x_min, self.y_min, self.width, self.height]

    @classmethod
    def from_xywh(cls, xywh, label: str = "", score: float = 1.0) -> "BBox":
        x, y, w, h = (int(v) for v in xywh)
        return cls(x, y, x + w, y + h, label, score)


def box_iou(a: BBox, b: BBox) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def mask_bbox(mask: np.ndarray, label: str = "", score: float = 1.0) -> Optional[BBox]:
    """Tight bounding box of the nonzero cells of ``mask``, or None if empty."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1, label, score)


def box_mask(box: BBox, height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    mask[box.y_min:box.y_max, box.x_min:box.x_max] = True
    return mask


def image_hw(image: np.ndarray) -> tuple[int, int]:
    return int(image.shape[0]), int(image.shape[1])
