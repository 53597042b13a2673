import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cacp.errors import DimensionMismatchError, LengthMismatchError
from cacp.geometry import BBox
from cacp.metrics import DetectionMatch, accuracy, ap_per_class, iou_mask, map50, miou


def pixel_iou(a, b):
    pa = {(x, y) for x in range(a.x_min, a.x_max) for y in range(a.y_min, a.y_max)}
    pb = {(x, y) for x in range(b.x_min, b.x_max) for y in range(b.y_min, b.y_max)}
    return len(pa & pb) / len(pa | pb)


def oracle_ap(ordered_preds, gts, threshold=0.5):
    """AP of predictions processed in the given order, everything recomputed naively.

    ``ordered_preds`` holds (image_id, box); ``gts`` maps image_id -> boxes.
    """
    n_gt = sum(len(v) for v in gts.values())
    used = set()
    flags = []
    for image_id, box in ordered_preds:
        best, best_iou = None, -1.0
        for j, g in enumerate(gts.get(image_id, [])):
            if (image_id, j) in used:
                continue
            iou = pixel_iou(box, g)
            if iou > best_iou:
                best, best_iou = j, iou
        hit = best is not None and best_iou >= threshold
        if hit:
            used.add((image_id, best))
        flags.append(hit)
    curve = []
    for k in range(1, len(flags) + 1):
        tp = sum(flags[:k])
        curve.append((tp / n_gt, tp / k))
    total = 0.0
    for i in range(101):
        r = i / 100
        total += max([p for rec, p in curve if rec >= r - 1e-12], default=0.0)
    return total / 101


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy(["a", "b"], ["a", "b"]) == 1.0

    def test_half(self):
        assert accuracy(["a", "b"], ["a", "c"]) == 0.5

    def test_mismatch(self):
        with pytest.raises(LengthMismatchError):
            accuracy(["a"], ["a", "b"])
        with pytest.raises(LengthMismatchError):
            accuracy([], [])

    def test_random_against_count(self):
        rng = np.random.default_rng(0)
        for k in (2, 3, 7):
            pred, truth = rng.integers(0, k, 1000).tolist(), rng.integers(0, k, 1000).tolist()
            correct = 0
            for p, t in zip(pred, truth):
                correct += p == t
            assert accuracy(pred, truth) == pytest.approx(correct / 1000, abs=1e-9)


class TestMaskIoU:
    def test_identical(self):
        m = np.random.default_rng(0).integers(0, 3, (8, 8))
        assert iou_mask(m, m, 1) == 1.0
        assert miou(m, m, [0, 1, 2, 5]) == 1.0

    def test_disjoint(self):
        a, b = np.zeros((4, 4), int), np.zeros((4, 4), int)
        a[0:2, 0:2] = 1
        b[2:4, 2:4] = 1
        assert iou_mask(a, b, 1) == 0.0

    def test_half_overlap(self):
        a, b = np.zeros((4, 4), int), np.zeros((4, 4), int)
        a[0:2, 0:2] = 1
        b[0:2, 1:3] = 1
        assert iou_mask(a, b, 1) == pytest.approx(1 / 3, abs=1e-9)

    def test_absent_conventions(self):
        z = np.zeros((3, 3), int)
        assert iou_mask(z, z, 4) == 1.0
        assert iou_mask(z, z, 4, absent="skip") is None

    def test_two_class_mean(self):
        a = np.array([[1, 1], [2, 2]])
        b = np.array([[1, 1], [3, 3]])
        assert miou(a, b, [1, 2]) == pytest.approx(0.5)

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            iou_mask(np.zeros((2, 2)), np.zeros((3, 2)), 1)

    def test_random_against_per_class_counts(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p, t = rng.integers(0, 3, (8, 8)), rng.integers(0, 3, (8, 8))
            expected = []
            for c in range(3):
                tp = fp = fn = 0
                for y in range(8):
                    for x in range(8):
                        tp += p[y, x] == c and t[y, x] == c
                        fp += p[y, x] == c and t[y, x] != c
                        fn += p[y, x] != c and t[y, x] == c
                expected.append(tp / (tp + fp + fn) if tp + fp + fn else 1.0)
            assert miou(p, t, range(3)) == pytest.approx(sum(expected) / 3, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetry_and_range(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.integers(0, 3, (6, 6)), rng.integers(0, 3, (6, 6))
        for c in range(3):
            assert iou_mask(a, b, c) == iou_mask(b, a, c)
            assert 0.0 <= iou_mask(a, b, c) <= 1.0
        perm = rng.permutation(36)
        assert miou(a, b, range(3)) == pytest.approx(miou(a.ravel()[perm], b.ravel()[perm], range(3)))


def random_instance(rng, max_preds=3):
    n_images = int(rng.integers(1, 3))
    gts, preds = {}, []
    for i in range(n_images):
        gts[i] = []
        for _ in range(int(rng.integers(0, 3))):
            x, y = rng.integers(0, 6, 2)
            gts[i].append(BBox(int(x), int(y), int(x + rng.integers(2, 5)), int(y + rng.integers(2, 5)), "obj"))
    for _ in range(int(rng.integers(1, max_preds + 1))):
        i = int(rng.integers(0, n_images))
        if gts[i] and rng.random() < 0.7:
            g = gts[i][int(rng.integers(len(gts[i])))]
            dx, dy = rng.integers(-1, 2, 2)
            x0, y0 = max(0, g.x_min + int(dx)), max(0, g.y_min + int(dy))
            box = BBox(x0, y0, max(x0 + 1, g.x_max + int(dx)), max(y0 + 1, g.y_max + int(dy)), "obj")
        else:
            x, y = rng.integers(0, 6, 2)
            box = BBox(int(x), int(y), int(x + rng.integers(1, 5)), int(y + rng.integers(1, 5)), "obj")
        preds.append((i, box))
    return gts, preds


def as_matches(gts, scored):
    matches = [DetectionMatch([], list(gts[i])) for i in sorted(gts)]
    for (i, box), score in scored:
        matches[i].predictions.append((box, score))
    return matches


class TestMap50:
    def test_exact_single(self):
        g = BBox(2, 2, 8, 8, "car")
        assert map50([DetectionMatch([(g, 0.9)], [g])]) == 1.0

    def test_below_threshold(self):
        g = BBox(0, 0, 10, 10, "car")
        p = BBox(0, 0, 10, 4, "car")  # IoU 0.4
        assert pixel_iou(p, g) == pytest.approx(0.4)
        assert map50([DetectionMatch([(p, 0.9)], [g])]) == 0.0

    def test_no_ground_truth(self):
        assert math.isnan(map50([DetectionMatch([(BBox(0, 0, 2, 2, "car"), 0.5)], [])]))

    def test_empty_predictions(self):
        assert map50([DetectionMatch([], [BBox(0, 0, 2, 2, "car")])]) == 0.0

    def test_planted_three_predictions(self):
        g1, g2 = BBox(0, 0, 10, 10, "car"), BBox(20, 20, 30, 30, "car")
        preds = [(0, BBox(0, 0, 10, 9, "car")), (0, BBox(40, 40, 45, 45, "car")), (0, BBox(20, 21, 30, 30, "car"))]
        scores = [0.9, 0.8, 0.7]
        got = map50(as_matches({0: [g1, g2]}, list(zip(preds, scores))))
        # TP, FP, TP: precision 1 up to recall 0.5, then 2/3 up to recall 1
        assert got == pytest.approx((51 * 1.0 + 50 * (2 / 3)) / 101, abs=1e-9)
        assert got == pytest.approx(oracle_ap(preds, {0: [g1, g2]}), abs=1e-9)

    def test_agrees_with_oracle_over_all_orderings(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            gts, preds = random_instance(rng)
            if not any(gts.values()):
                continue
            for order in itertools.permutations(range(len(preds))):
                ordered = [preds[i] for i in order]
                scored = [(p, 1.0 - k / (len(ordered) + 1)) for k, p in enumerate(ordered)]
                assert map50(as_matches(gts, scored)) == pytest.approx(oracle_ap(ordered, gts), abs=1e-9)

    def test_removing_false_positive_never_hurts(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            gts, preds = random_instance(rng, max_preds=4)
            if not any(gts.values()):
                continue
            scored = [(p, float(s)) for p, s in zip(preds, rng.random(len(preds)))]
            matches = as_matches(gts, scored)
            full = map50(matches)
            for k in range(len(scored)):
                (i, box), _ = scored[k]
                if max((pixel_iou(box, g) for g in gts[i]), default=0.0) < 0.5:
                    reduced = map50(as_matches(gts, scored[:k] + scored[k + 1:]))
                    assert reduced >= full - 1e-12

    def test_class_mean(self):
        a, b = BBox(0, 0, 4, 4, "a"), BBox(5, 5, 9, 9, "b")
        per_class = ap_per_class([DetectionMatch([(a, 0.9)], [a, b])])
        assert per_class == {"a": 1.0, "b": 0.0}
        assert map50([DetectionMatch([(a, 0.9)], [a, b])]) == 0.5

    def test_threshold_validated(self):
        with pytest.raises(ValueError):
            DetectionMatch(iou_threshold=1.0)
