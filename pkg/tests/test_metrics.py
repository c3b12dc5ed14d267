import math

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from ucseg.errors import EmptyReportError, ShapeError
from ucseg.metrics import (aggregate_report, asd, boundary, dice_score, e_measure, hd95, image_metrics,
                           iou_score)


# brute-force oracles -------------------------------------------------------

def boundary_oracle(mask):
    H, W = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for i in range(H):
        for j in range(W):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                y, x = i + di, j + dj
                if not (0 <= y < H and 0 <= x < W) or not mask[y, x]:
                    out[i, j] = True
    return out


def distances_oracle(pred, gt):
    pa = np.argwhere(boundary_oracle(pred))
    ga = np.argwhere(boundary_oracle(gt))
    d = cdist(pa, ga)
    return np.concatenate([d.min(axis=1), d.min(axis=0)])


def percentile_oracle(values, q):
    v = sorted(values)
    pos = (len(v) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def dice_oracle(pred, gt):
    inter = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p and g)
    total = int(pred.sum()) + int(gt.sum())
    return 1.0 if total == 0 else 2 * inter / total


def e_measure_oracle(pred, gt):
    p = [float(v) for v in pred.ravel()]
    g = [float(v) for v in gt.ravel()]
    n = len(p)
    if sum(g) == 0:
        return sum(1.0 - v for v in p) / n
    if sum(g) == n:
        return sum(p) / n
    mp, mg = sum(p) / n, sum(g) / n
    acc = 0.0
    for a, b in zip(p, g):
        x, y = a - mp, b - mg
        xi = 2 * x * y / (x * x + y * y + 2.220446049250313e-16)
        acc += (1 + xi) ** 2 / 4
    return acc / n


def _random_mask(rng, shape=(16, 16), p=0.35):
    m = rng.random(shape) < p
    m[rng.integers(shape[0]), rng.integers(shape[1])] = True
    return m


# tests ---------------------------------------------------------------------

class TestOverlap:
    def test_oracle(self, rng):
        for _ in range(50):
            a, b = _random_mask(rng), _random_mask(rng)
            assert abs(dice_score(a, b) - dice_oracle(a, b)) < 1e-10

    def test_dice_iou_relation(self, rng):
        for _ in range(50):
            a, b = _random_mask(rng), _random_mask(rng)
            j = iou_score(a, b)
            assert dice_score(a, b) == pytest.approx(2 * j / (1 + j), abs=1e-12)

    def test_both_empty(self):
        z = np.zeros((4, 4), bool)
        assert dice_score(z, z) == 1.0 and iou_score(z, z) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        b = a.copy()
        a[0, 0], b[3, 3] = True, True
        assert dice_score(a, b) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_score(np.zeros((3, 3)), np.zeros((3, 4)))


class TestSurface:
    def test_boundary_oracle(self, rng):
        for _ in range(30):
            m = _random_mask(rng, p=0.6)
            assert np.array_equal(boundary(m), boundary_oracle(m))

    def test_hd95_asd_oracle(self, rng):
        for _ in range(30):
            a, b = _random_mask(rng), _random_mask(rng)
            d = distances_oracle(a, b)
            assert abs(hd95(a, b) - percentile_oracle(list(d), 95)) < 1e-10
            assert abs(asd(a, b) - d.mean()) < 1e-10

    def test_symmetric(self, rng):
        for _ in range(20):
            a, b = _random_mask(rng), _random_mask(rng)
            assert hd95(a, b) == pytest.approx(hd95(b, a), abs=1e-12)
            assert asd(a, b) == pytest.approx(asd(b, a), abs=1e-12)

    def test_identical(self, rng):
        m = _random_mask(rng)
        assert hd95(m, m) == 0.0 and asd(m, m) == 0.0

    def test_shifted_square(self):
        a = np.zeros((16, 16), bool)
        b = a.copy()
        a[4:10, 4:10] = True
        b[4:10, 5:11] = True
        assert hd95(a, b) == pytest.approx(1.0)

    def test_empty_is_nan(self):
        a = np.zeros((8, 8), bool)
        b = a.copy()
        b[2, 2] = True
        assert math.isnan(hd95(a, b)) and math.isnan(asd(b, a))

    def test_3d_boundary_uses_six_neighbours(self):
        m = np.zeros((5, 5, 5), bool)
        m[1:4, 1:4, 1:4] = True
        assert boundary(m).sum() == 26


class TestEMeasure:
    def test_oracle(self, rng):
        for _ in range(50):
            a, b = _random_mask(rng), _random_mask(rng)
            assert abs(e_measure(a, b) - e_measure_oracle(a, b)) < 1e-10

    def test_degenerate_gt(self, rng):
        a = _random_mask(rng)
        z = np.zeros_like(a)
        assert abs(e_measure(a, z) - e_measure_oracle(a, z)) < 1e-10
        assert abs(e_measure(a, ~z) - e_measure_oracle(a, ~z)) < 1e-10

    def test_perfect(self, rng):
        m = _random_mask(rng)
        assert e_measure(m, m) == pytest.approx(1.0)

    def test_inverted_is_zero(self):
        m = np.zeros((8, 8), bool)
        m[:, :4] = True
        assert e_measure(~m, m) == pytest.approx(0.0, abs=1e-12)


class TestReport:
    def test_image_metrics_multiclass(self, rng):
        pred = rng.integers(0, 3, size=(12, 12))
        gt = rng.integers(0, 3, size=(12, 12))
        got = image_metrics(pred, gt, 3)
        expected = np.mean([dice_oracle(pred == c, gt == c) for c in (1, 2)])
        assert got["dice"] == pytest.approx(expected, abs=1e-12)

    def test_exclusion_count(self):
        gt = np.zeros((8, 8), int)
        gt[2:5, 2:5] = 1
        empty = np.zeros_like(gt)
        rows = [image_metrics(gt, gt), image_metrics(empty, gt)]
        rep = aggregate_report(rows)
        assert rep.excluded["hd95"] == 1 and rep.excluded["dice"] == 0
        assert rep.aggregate["hd95"] == 0.0
        assert rep.aggregate["dice"] == pytest.approx(0.5)
        assert rep.n_images == 2

    def test_empty_report(self):
        with pytest.raises(EmptyReportError):
            aggregate_report([])

    def test_to_dict(self):
        gt = np.ones((4, 4), int)
        d = aggregate_report([image_metrics(gt, gt)]).to_dict()
        assert set(d) == {"n_images", "aggregate", "excluded", "per_image"}
