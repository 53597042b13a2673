from __future__ import annotations

import json
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from cacp.config import RunConfig

PALETTE = {
    "dog": (200, 120, 40),
    "cat": (90, 90, 220),
    "car": (220, 30, 30),
    "tree": (30, 160, 60),
}


def save_png(path: Path, array: np.ndarray) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)
    return path


def rect_image(h, w, boxes, colours=None):
    """Black image with filled rectangles; ``boxes`` are (x0, y0, x1, y1)."""
    img = np.zeros((h, w, 3), dtype=np.uint8)
    for i, (x0, y0, x1, y1) in enumerate(boxes):
        img[y0:y1, x0:x1] = (colours or [(255, 255, 255)] * len(boxes))[i]
    return img


def make_gallery(root: Path, per_class=2, size=32, seed=0) -> Path:
    """Folder-per-class gallery; every image holds one coloured rectangle."""
    rng = np.random.default_rng(seed)
    for cat, colour in PALETTE.items():
        for i in range(per_class):
            w, h = rng.integers(8, 20, size=2)
            x0, y0 = rng.integers(0, size - w), rng.integers(0, size - h)
            save_png(root / cat / f"{cat}{i}.png", rect_image(size, size, [(x0, y0, x0 + w, y0 + h)], [colour]))
    return root


def base_image(rng, h=48, w=64):
    return rng.integers(30, 255, size=(h, w, 3), dtype=np.uint8)


def make_classification(root: Path, n=20, seed=1) -> Path:
    rng = np.random.default_rng(seed)
    for i in range(n):
        save_png(root / ("cat" if i % 2 else "dog") / f"img{i:02d}.png", base_image(rng))
    return root


def make_detection(root: Path, n=20, seed=2) -> Path:
    rng = np.random.default_rng(seed)
    images, annotations = [], []
    for i in range(n):
        name = f"img{i:02d}.png"
        save_png(root / "images" / name, base_image(rng))
        images.append({"id": i + 1, "file_name": name, "width": 64, "height": 48})
        for _ in range(int(rng.integers(0, 3))):
            x, y = int(rng.integers(0, 40)), int(rng.integers(0, 30))
            w, h = int(rng.integers(4, 64 - x)), int(rng.integers(4, 48 - y))
            annotations.append(
                {"id": len(annotations) + 1, "image_id": i + 1, "category_id": int(rng.integers(1, 3)), "bbox": [x, y, w, h]}
            )
    coco = {"images": images, "annotations": annotations, "categories": [{"id": 1, "name": "person"}, {"id": 2, "name": "car"}]}
    (root / "annotations.json").write_text(json.dumps(coco, indent=1))
    return root


def make_segmentation(root: Path, n=20, seed=3) -> Path:
    rng = np.random.default_rng(seed)
    for i in range(n):
        save_png(root / "images" / f"img{i:02d}.png", base_image(rng))
        mask = np.zeros((48, 64), dtype=np.uint8)
        x, y = int(rng.integers(0, 40)), int(rng.integers(0, 30))
        mask[y:y + 12, x:x + 16] = 1
        save_png(root / "masks" / f"img{i:02d}.png", mask)
    (root / "classes.json").write_text(json.dumps({"0": "background", "1": "road"}))
    return root


@pytest.fixture
def gallery_dir(tmp_path):
    return make_gallery(tmp_path / "gallery")


def fake_config(tmp_path, task, source, gallery, **kw) -> RunConfig:
    config = RunConfig(task=task, source_dir=source, gallery_dir=gallery, output_dir=tmp_path / "out")
    config.backends = {role: "fake" for role in config.backends}
    for key, value in kw.items():
        setattr(config, key, value)
    return config


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- acceptance reporting ------------------------------------------------------

CRITERIA: list[str] = []


@contextmanager
def criterion(number: int, title: str):
    """Record one PASS/FAIL line for an acceptance criterion."""
    try:
        yield
    except pytest.skip.Exception:
        CRITERIA.append(f"SKIP  criterion {number}: {title}")
        raise
    except BaseException:
        CRITERIA.append(f"FAIL  criterion {number}: {title}")
        raise
    CRITERIA.append(f"PASS  criterion {number}: {title}")


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
