import xml.etree.ElementTree as ET

import numpy as np
import pytest
from scipy import ndimage

from rcnkit.bench import (
    BenchmarkError,
    BenchmarkSummary,
    MatchCounts,
    benchmark,
    correspond,
    correspond_multi,
    default_thresholds,
    export_report,
    f_measure,
    image_counts,
    iso_f_curve,
    nms_thin,
    read_pr_csv,
    render_svg,
    summarize,
    tolerance_px,
)
from rcnkit.imageio import dequantize, quantize

from oracles import f_of, max_matching_bruteforce


def smooth_random_map(rng, shape=(24, 24)):
    m = ndimage.gaussian_filter(rng.random(shape), rng.uniform(0.5, 2.0))
    m -= m.min()
    return m / m.max()


class TestNms:
    def test_vertical_ridge_unchanged(self):
        m = np.zeros((12, 12))
        m[:, 5] = 1.0
        np.testing.assert_array_equal(nms_thin(m), m)

    def test_horizontal_ridge_unchanged(self):
        m = np.zeros((12, 12))
        m[7, :] = 1.0
        np.testing.assert_array_equal(nms_thin(m), m)

    def test_raised_plateau_column_survives(self):
        m = np.zeros((12, 12))
        m[:, 5] = 0.98
        m[:, 6] = 0.99
        out = nms_thin(m)
        expected = np.zeros_like(m)
        expected[:, 6] = 0.99
        np.testing.assert_array_equal(out, expected)
        m[:, 5], m[:, 6] = 0.99, 0.98
        assert set(np.nonzero(nms_thin(m))[1]) == {5}

    def test_zeros(self):
        assert not nms_thin(np.zeros((9, 7))).any()

    def test_survivors_keep_values(self):
        m = smooth_random_map(np.random.default_rng(0))
        out = nms_thin(m)
        kept = out > 0
        np.testing.assert_array_equal(out[kept], m[kept])
        assert 0 < kept.sum() < m.size

    def test_idempotent_on_random_maps(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            once = nms_thin(smooth_random_map(rng, tuple(rng.integers(8, 30, 2))))
            np.testing.assert_array_equal(nms_thin(once), once)

    def test_gaussian_ridge_thinned_to_center(self):
        x = np.arange(20)
        m = np.tile(np.exp(-((x - 9.3) ** 2) / 4.0), (10, 1))
        assert set(np.nonzero(nms_thin(m))[1]) == {9}

    def test_sixteen_bit_resolves_plateau(self):
        ramp = np.array([0.3, 0.7, 0.9985, 0.9995, 0.8, 0.4])
        m = np.zeros((10, 10))
        m[:, 2:8] = ramp
        q8, q16 = dequantize(quantize(m, 8)), dequantize(quantize(m, 16))
        # 8-bit merges the two top samples into a tie; 16-bit keeps them apart
        assert q8[0, 4] == q8[0, 5]
        assert q16[0, 5] > q16[0, 4]
        assert set(np.nonzero(nms_thin(q16))[1]) == {5}
        assert set(np.nonzero(nms_thin(q8))[1]) == {4}
        assert len(np.unique(q8)) < len(np.unique(q16))

    def test_fewer_binarizations_at_eight_bits(self):
        m = np.random.default_rng(2).random((16, 16))
        q8, q16 = dequantize(quantize(m, 8)), dequantize(quantize(m, 16))
        ts = np.linspace(0, 1, 2001)
        distinct = lambda q: len({(q >= t).tobytes() for t in ts})  # noqa: E731
        assert distinct(q8) <= distinct(q16)


def random_instance(rng, shape=(8, 8), max_pixels=20):
    n = int(rng.integers(0, max_pixels + 1))
    flat = rng.choice(shape[0] * shape[1] * 2, size=n, replace=False)
    pred = np.zeros(shape[0] * shape[1], bool)
    gt = np.zeros(shape[0] * shape[1], bool)
    for f in flat:
        (pred if f < pred.size else gt)[f % pred.size] = True
    return pred.reshape(shape), gt.reshape(shape)


class TestCorrespond:
    def test_identical(self):
        m = np.zeros((10, 10), bool)
        m[3, 2:8] = True
        c = correspond(m, m, 1.0)
        assert (c.precision, c.recall) == (1.0, 1.0)

    def test_shift_within_tolerance(self):
        gt = np.zeros((10, 10), bool)
        gt[2:8, 4] = True
        gt[5, 5:8] = True
        pred = np.roll(gt, 1, axis=1)
        c = correspond(pred, gt, 2.0)
        assert c.tp_pred == c.total_pred == c.tp_gt == c.total_gt == 9
        assert max_matching_bruteforce(pred, gt, 2.0) == 9

    def test_competition(self):
        gt = np.zeros((5, 5), bool)
        gt[2, 2] = True
        pred = np.zeros((5, 5), bool)
        pred[2, 1] = pred[2, 3] = True
        c = correspond(pred, gt, 1.0)
        assert (c.tp_pred, c.total_pred, c.tp_gt, c.total_gt) == (1, 2, 1, 1)

    def test_distance_inclusive(self):
        gt = np.zeros((6, 6), bool)
        pred = np.zeros((6, 6), bool)
        gt[0, 0], pred[3, 4] = True, True
        assert correspond(pred, gt, 5.0).tp_pred == 1
        assert correspond(pred, gt, 4.99).tp_pred == 0

    def test_against_bruteforce(self):
        rng = np.random.default_rng(0)
        for _ in range(600):
            pred, gt = random_instance(rng)
            tol = float(rng.choice([1.0, 1.5, 2.0, 2.5, 3.0]))
            c = correspond(pred, gt, tol)
            best = max_matching_bruteforce(pred, gt, tol)
            assert c.tp_pred == c.tp_gt == best
            assert c.total_pred == pred.sum() and c.total_gt == gt.sum()

    def test_errors(self):
        with pytest.raises(BenchmarkError):
            correspond(np.zeros((3, 3)), np.zeros((3, 4)), 1.0)
        with pytest.raises(BenchmarkError):
            correspond(np.zeros((3, 3)), np.zeros((3, 3)), 0.0)

    def test_tolerance_convention(self):
        assert tolerance_px((96, 96)) == pytest.approx(0.0075 * 96 * np.sqrt(2))


class TestCorrespondMulti:
    def test_single_reduces(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            pred, gt = random_instance(rng)
            assert correspond_multi(pred, [gt], 1.5) == correspond(pred, gt, 1.5)

    def test_identical_annotators(self):
        gt = np.zeros((8, 8), bool)
        gt[2, 1:7] = True
        c = correspond_multi(gt, [gt, gt], 1.0)
        assert (c.precision, c.recall) == (1.0, 1.0)
        assert c.total_gt == 12

    def test_disjoint_annotators(self):
        g1 = np.zeros((12, 12), bool)
        g2 = np.zeros((12, 12), bool)
        g1[1, 1:6] = True
        g2[9, 2:11] = True
        c = correspond_multi(g1, [g1, g2], 1.0)
        assert c.precision == 1.0
        assert c.recall == pytest.approx(5 / 14)

    def test_union_precision(self):
        g1 = np.zeros((12, 12), bool)
        g2 = np.zeros((12, 12), bool)
        g1[1, 1:6] = True
        g2[9, 2:11] = True
        pred = g1 | g2
        c = correspond_multi(pred, [g1, g2], 1.0)
        assert (c.tp_pred, c.total_pred) == (14, 14)

    def test_empty_set(self):
        with pytest.raises(BenchmarkError):
            correspond_multi(np.zeros((3, 3)), [], 1.0)


def toy_counts():
    """Three images at thresholds 0.25/0.5/0.75, counts (tp_pred, total_pred, tp_gt, total_gt)."""
    a = [MatchCounts(4, 5, 4, 4), MatchCounts(3, 3, 3, 4), MatchCounts(1, 1, 1, 4)]
    b = [MatchCounts(2, 6, 3, 6), MatchCounts(2, 3, 2, 6), MatchCounts(0, 0, 0, 6)]
    c = [MatchCounts(5, 5, 5, 10), MatchCounts(4, 4, 4, 10), MatchCounts(2, 2, 2, 10)]
    return [a, b, c], np.array([0.25, 0.5, 0.75])


class TestSummary:
    def test_hand_computed_toy(self):
        # dataset totals: t=.25 P=11/16 R=12/20; t=.5 P=9/10 R=9/20; t=.75 P=1 R=3/20
        # per-image bests: A at .25, B at .5, C at .25 -> P=11/13 R=11/20 -> F=2/3
        # envelope (0,1) (.15,1) (.45,.9) (.6,.6875) -> .15 + .285 + .1190625
        per_image, ts = toy_counts()
        s = summarize(per_image, ts)
        assert abs(s.ods - 0.825 / 1.2875) < 1e-9
        assert abs(s.ois - 2 / 3) < 1e-9
        assert abs(s.ap - 0.5540625) < 1e-9
        assert s.ods_threshold == 0.25
        assert [p[:3] for p in s.pr_points] == [(0.25, 0.6875, 0.6), (0.5, 0.9, 0.45), (0.75, 1.0, 0.15)]

    def test_perfect(self):
        rng = np.random.default_rng(4)
        gts = [(rng.random((20, 20)) < 0.1) for _ in range(3)]
        s = benchmark([g.astype(float) for g in gts], [[g] for g in gts])
        assert s.ods == s.ois == s.ap == 1.0

    def test_empty_predictions(self):
        gts = [np.eye(10, dtype=bool)] * 2
        s = benchmark([np.zeros((10, 10))] * 2, gts)
        assert s.ods == 0.0 and s.ois == 0.0

    def test_no_ground_truth(self):
        with pytest.raises(BenchmarkError):
            benchmark([np.ones((5, 5))], [[np.zeros((5, 5))]])

    def test_thresholds(self):
        ts = default_thresholds()
        assert len(ts) == 99 and ts[0] == 0.01 and ts[-1] == 0.99
        with pytest.raises(BenchmarkError):
            default_thresholds(1)

    def test_random_invariants(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            preds, gts = [], []
            for _ in range(3):
                m = smooth_random_map(rng, (20, 20))
                preds.append(nms_thin(m))
                gts.append([nms_thin(smooth_random_map(rng, (20, 20))) > 0.5 for _ in range(2)])
            ts = default_thresholds(19)
            per_image = [image_counts(p, g, ts, 1.5) for p, g in zip(preds, gts)]
            for img in per_image:
                totals = [c.total_pred for c in img]
                assert totals == sorted(totals, reverse=True)
            s = summarize(per_image, ts)
            assert all(s.ods >= f - 1e-12 for *_, f in s.pr_points)
            assert s.ois >= s.ods - 1e-12
            for _, p, r, f in s.pr_points:
                assert f == pytest.approx(f_of(p, r))
            assert 0 <= s.ap <= 1

    def test_f_measure(self):
        assert f_measure(0, 0) == 0
        assert f_measure(0.8, 0.8) == pytest.approx(0.8)


class TestReport:
    @pytest.fixture
    def summary(self):
        per_image, ts = toy_counts()
        return summarize(per_image, ts)

    def test_csv_round_trip(self, summary, tmp_path):
        csv_path, _ = export_report(summary, tmp_path)
        assert read_pr_csv(csv_path) == summary.pr_points
        assert csv_path.read_text().splitlines()[0] == "threshold,precision,recall,f"

    def test_svg_well_formed(self, summary, tmp_path):
        _, svg_path = export_report(summary, tmp_path)
        root = ET.parse(svg_path).getroot()
        ns = "{http://www.w3.org/2000/svg}"
        iso = [el for el in root.iter(ns + "polyline") if el.get("class") == "iso-f"]
        assert sorted(el.get("data-f") for el in iso) == ["0.5", "0.6", "0.7", "0.8", "0.9"]

    def test_iso_f_through_point(self, summary):
        curve = iso_f_curve(0.8, n=1000)
        assert all(f_of(p, r) == pytest.approx(0.8) for r, p in curve)
        r = curve[:, 0]
        k = int(np.argmin(np.abs(r - 0.8)))
        assert curve[k, 1] == pytest.approx(0.8, abs=2e-3)
        assert 'data-f="0.8"' in render_svg(summary)

    def test_empty_summary_renders(self):
        svg = render_svg(BenchmarkSummary([(0.5, 1.0, 0.0, 0.0)], 0.0, 0.0, 0.0))
        ET.fromstring(svg)
