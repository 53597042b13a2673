import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cacp.backends import FakeDetector, FakeSaliency, Heatmap, fake_backends
from cacp.errors import ConfigError, NoObjectFoundError
from cacp.geometry import BBox
from cacp.prompts import (
    build_prompt,
    normalize_mode,
    pick_object_box,
    sample_cam_points,
    sample_random_points,
)

from conftest import rect_image


def exhaustive_greedy(grid, box, n, min_sep):
    """Scan every cell on each round and take the best admissible one."""
    chosen = []
    limit = min_sep * math.hypot(box.width, box.height)
    while len(chosen) < n:
        best = None
        for y in range(grid.shape[0]):
            for x in range(grid.shape[1]):
                if not (box.x_min <= x < box.x_max and box.y_min <= y < box.y_max) or (x, y) in chosen:
                    continue
                if any(math.hypot(x - cx, y - cy) < limit for cx, cy in chosen):
                    continue
                if best is None or grid[y, x] > grid[best[1], best[0]]:
                    best = (x, y)
        if best is None:
            break
        chosen.append(best)
    return chosen


def planted_heatmaps(count=60, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(count):
        kind = i % 3
        if kind == 0:
            grid = rng.random((16, 16))
        elif kind == 1:
            grid = np.round(rng.random((16, 16)) * 4) / 4  # many ties
        else:
            ys, xs = np.mgrid[0:16, 0:16]
            cx, cy = rng.uniform(0, 16, 2)
            grid = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / rng.uniform(4, 40))
        x0, y0 = rng.integers(0, 10, 2)
        box = BBox(int(x0), int(y0), int(rng.integers(x0 + 1, 17)), int(rng.integers(y0 + 1, 17)))
        yield Heatmap(grid), box, int(rng.integers(0, 7)), float(rng.choice([0.0, 0.1, 0.15, 0.3, 0.6]))


class TestPickBox:
    def test_planted(self):
        img = rect_image(16, 16, [(2, 2, 8, 8)], [(1, 2, 3)])
        assert pick_object_box(img, "dog", FakeDetector({(1, 2, 3): "dog"})).as_tuple() == (2, 2, 8, 8)

    def test_mismatch(self):
        img = rect_image(16, 16, [(2, 2, 8, 8)], [(1, 2, 3)])
        with pytest.raises(NoObjectFoundError):
            pick_object_box(img, "cat", FakeDetector({(1, 2, 3): "dog"}))

    def test_highest_score(self):
        class Planted:
            def detect(self, image, hint=None):
                return [BBox(0, 0, 4, 4, "dog", 0.7), BBox(5, 5, 9, 9, "dog", 0.9), BBox(1, 1, 3, 3, "cat", 0.95)]

        assert pick_object_box(None, "dog", Planted()).score == max(0.7, 0.9)


class TestCamPoints:
    def test_zero(self):
        assert sample_cam_points(Heatmap(np.ones((4, 4)) * 0.5), BBox(0, 0, 4, 4), 0) == []

    def test_fake_peak(self):
        img = rect_image(16, 16, [(3, 5, 11, 13)])
        hm = FakeSaliency().saliency(img, "x")
        assert sample_cam_points(hm, BBox(3, 5, 11, 13), 1) == [BBox(3, 5, 11, 13).center]

    def test_matches_exhaustive_oracle(self):
        for hm, box, n, sep in planted_heatmaps():
            assert sample_cam_points(hm, box, n, sep) == exhaustive_greedy(hm.grid, box, n, sep)

    def test_dominance(self):
        for hm, box, n, sep in planted_heatmaps(seed=1):
            pts = sample_cam_points(hm, box, n, sep)
            limit = sep * box.diagonal
            for y in range(box.y_min, box.y_max):
                for x in range(box.x_min, box.x_max):
                    if (x, y) in pts or any(math.hypot(x - px, y - py) < limit for px, py in pts):
                        continue
                    assert all(hm.grid[py, px] >= hm.grid[y, x] for px, py in pts)
                    assert len(pts) == n

    def test_separation_limits_count(self):
        pts = sample_cam_points(Heatmap(np.ones((4, 4)) * 0.5), BBox(0, 0, 2, 2), 3, min_sep=0.45)
        assert len(pts) == 2


class TestRandomPoints:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.integers(0, 16))
    def test_inside_and_reproducible(self, seed, n):
        box = BBox(3, 4, 9, 7)
        pts = sample_random_points(box, n, seed)
        assert len(pts) == n
        assert all(box.contains_point(x, y) for x, y in pts)
        assert pts == sample_random_points(box, n, seed)

    def test_zero(self):
        assert sample_random_points(BBox(0, 0, 2, 2), 0, 1) == []


class TestBuildPrompt:
    def setup_method(self):
        self.img = rect_image(32, 32, [(4, 6, 28, 26)])
        self.backends = fake_backends()

    def test_box_only(self):
        bundle = build_prompt(self.img, "dog", "box", 3, self.backends)
        assert bundle.points == () and bundle.mode == "box_only"

    def test_cam(self):
        calls = []
        inner = self.backends.saliency

        class Counting:
            def saliency(self, image, label):
                calls.append(label)
                return inner.saliency(image, label)

        self.backends.saliency = Counting()
        bundle = build_prompt(self.img, "dog", "box+cam", 3, self.backends)
        assert len(bundle.points) == 3 and len(calls) == 1
        assert all(bundle.box.contains_point(p.x, p.y) for p in bundle.points)
        limit = 0.15 * bundle.box.diagonal
        pts = [(p.x, p.y) for p in bundle.points]
        assert all(math.hypot(a[0] - b[0], a[1] - b[1]) >= limit for i, a in enumerate(pts) for b in pts[i + 1:])

    def test_random(self):
        assert len(build_prompt(self.img, "dog", "box_plus_random", 1, self.backends, rng_seed=3).points) == 1

    def test_deterministic(self):
        for mode in ("box", "box+rand", "box+cam"):
            a = build_prompt(self.img, "dog", mode, 4, self.backends, rng_seed=9)
            b = build_prompt(self.img, "dog", mode, 4, self.backends, rng_seed=9)
            assert a == b

    def test_bad_args(self):
        with pytest.raises(ConfigError):
            build_prompt(self.img, "dog", "box+cam", 17, self.backends)
        with pytest.raises(ConfigError):
            normalize_mode("points")

    def test_no_object(self):
        with pytest.raises(NoObjectFoundError):
            build_prompt(np.zeros((8, 8, 3), np.uint8), "dog", "box", 0, self.backends)
