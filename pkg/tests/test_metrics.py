import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lrrnet import metrics as mt

# --- binarize / components ------------------------------------------------


def test_binarize():
    assert not mt.binarize(np.full((3, 3), 0.4)).any()
    c = np.array([0.0, 0.1, 1.0])
    np.testing.assert_array_equal(mt.binarize(c, 0.0), [False, True, True])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)), st.floats(0, 1), st.floats(0, 1))
def test_binarize_nested(conf, a, b):
    lo, hi = min(a, b), max(a, b)
    assert np.all(mt.binarize(conf, hi) <= mt.binarize(conf, lo))


def test_components_two_squares_and_diagonal():
    m = np.zeros((6, 6), bool)
    m[0:2, 0:2] = m[3:5, 3:5] = True
    cc = mt.connected_components(m)
    assert cc.count == 2
    np.testing.assert_allclose(cc.centroids, [[0.5, 0.5], [3.5, 3.5]])
    np.testing.assert_array_equal(cc.sizes, [4, 4])
    d = np.zeros((3, 3), bool)
    d[0, 0] = d[1, 1] = True
    assert mt.connected_components(d).count == 1


def test_components_raster_order():
    m = np.zeros((4, 4), bool)
    m[0, 3] = True
    m[2, 0] = True
    cc = mt.connected_components(m)
    assert cc.labels[0, 3] == 1 and cc.labels[2, 0] == 2


# --- pixel metrics --------------------------------------------------------


def test_pixel_metrics_perfect():
    rng = np.random.default_rng(0)
    gts = [rng.uniform(size=(5, 5)) > 0.7 for _ in range(4)]
    assert mt.pixel_metrics(gts, gts) == (1.0, 1.0)


def test_pixel_metrics_hand_count():
    gt = np.zeros((3, 3), bool)
    gt[0, :3] = True
    pred = np.zeros((3, 3), bool)
    pred[0, :2] = pred[1, 0] = True
    iou, niou = mt.pixel_metrics([pred], [gt])
    assert iou == 0.5 and niou == 0.5


def test_pixel_metrics_two_samples_pooled():
    g1 = np.zeros((4, 4), bool)
    g1[:2, :2] = True
    g2 = np.zeros((4, 4), bool)
    g2[3, 3] = True
    p2 = np.zeros((4, 4), bool)
    p2[0, 0] = True
    iou, niou = mt.pixel_metrics([g1, p2], [g1, g2])
    assert niou == 0.5
    assert iou == 4 / (5 + 5 - 4)


def test_pixel_metrics_errors():
    with pytest.raises(ValueError):
        mt.pixel_metrics([], [])
    with pytest.raises(ValueError):
        mt.pixel_metrics([np.zeros((2, 2))], [np.zeros((3, 3))])


def _counting_oracle(pred, gt):
    tp = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p and g)
    t = sum(1 for g in gt.ravel() if g)
    p = sum(1 for q in pred.ravel() if q)
    return 1.0 if t + p - tp == 0 else tp / (t + p - tp)


@pytest.mark.parametrize("gt_bits", [0b000000000, 0b000010000, 0b110110000, 0b101010101])
def test_pixel_metrics_exhaustive_3x3(gt_bits):
    gt = np.array([(gt_bits >> k) & 1 for k in range(9)], bool).reshape(3, 3)
    for bits in range(512):
        pred = np.array([(bits >> k) & 1 for k in range(9)], bool).reshape(3, 3)
        iou, niou = mt.pixel_metrics([pred], [gt])
        assert iou == niou == _counting_oracle(pred, gt)


# --- object metrics -------------------------------------------------------


def _blob(shape, cy, cx, r=1):
    m = np.zeros(shape, bool)
    m[max(cy - r, 0) : cy + r + 1, max(cx - r, 0) : cx + r + 1] = True
    return m


def object_fixture():
    """Ten hand-computed cases: (pred, gt, detected, targets, fa_pixels)."""
    s = (32, 32)
    z = np.zeros(s, bool)
    cases = []
    g = _blob(s, 10, 10)
    cases.append((g.copy(), g, 1, 1, 0))  # perfect single
    g2 = _blob(s, 5, 5) | _blob(s, 20, 20)
    cases.append((_blob(s, 5, 5), g2, 1, 2, 0))  # one of two found
    cases.append((z.copy(), g, 0, 1, 0))  # miss, no false alarms
    five = np.zeros(s, bool)
    five[25, 3:8] = True
    cases.append((g | five, g, 1, 1, 5))  # match plus 5-pixel false blob
    cases.append((_blob(s, 12, 12), g, 1, 1, 0))  # centroid 2.83 px away, within 3
    cases.append((_blob(s, 13, 13), g, 0, 1, 9))  # 4.24 px away: miss and false alarm
    two = _blob(s, 10, 8, 0) | _blob(s, 10, 12, 0)
    cases.append((two, g, 1, 1, 1))  # two candidates, one match, other is false
    cases.append((_blob(s, 20, 20), z, 0, 0, 9))  # no targets, one false blob
    cases.append((z.copy(), z, 0, 0, 0))  # empty / empty
    g3 = _blob(s, 8, 8, 0) | _blob(s, 8, 11, 0)
    p3 = _blob(s, 8, 9, 0)
    cases.append((p3, g3, 1, 2, 0))  # one prediction may match only one target
    return cases


def test_object_fixture_cases():
    for k, (pred, gt, det, tgt, fa_px) in enumerate(object_fixture()):
        c = mt.object_counts(pred, gt)
        assert (c.detected, c.targets, c.fa_pixels) == (det, tgt, fa_px), k


def test_object_metrics_pooled_over_fixture():
    cases = object_fixture()
    pd, fa = mt.object_metrics([c[0] for c in cases], [c[1] for c in cases])
    det = sum(c[2] for c in cases)
    tgt = sum(c[3] for c in cases)
    fa_px = sum(c[4] for c in cases)
    assert pd == det / tgt
    assert np.isclose(fa, fa_px / (len(cases) * 32 * 32) * 1e6)


def test_object_metrics_perfect_and_half():
    g = _blob((16, 16), 4, 4) | _blob((16, 16), 11, 11)
    assert mt.object_metrics([g], [g]) == (1.0, 0.0)
    pd, _ = mt.object_metrics([_blob((16, 16), 4, 4)], [g])
    assert pd == 0.5


def test_fa_five_pixels_in_256x256():
    pred = np.zeros((256, 256), bool)
    pred[100, 100:105] = True
    _, fa = mt.object_metrics([pred], [np.zeros_like(pred)])
    assert abs(fa - 5 / 65536 * 1e6) < 1e-9 and abs(fa - 76.3) < 0.05


def test_matching_prefers_closest_pair():
    g = np.zeros((20, 20), bool)
    g[5, 5] = g[5, 8] = True
    p = np.zeros((20, 20), bool)
    p[5, 7] = True
    pairs = mt.match_components(mt.connected_components(p), mt.connected_components(g))
    assert pairs == [(1, 0)]


# --- ROC / AUC ------------------------------------------------------------


def test_roc_oracle_confidence():
    rng = np.random.default_rng(0)
    gts = []
    for _ in range(4):
        g = np.zeros((32, 32), bool)
        for _ in range(2):
            cy, cx = rng.integers(3, 29, 2)
            g |= _blob((32, 32), cy, cx)
        gts.append(g)
    points, auc = mt.roc_auc([g.astype(float) for g in gts], gts)
    assert auc > 0.99
    assert max(pd for fa, pd in points if fa == 0.0) == 1.0


def test_roc_constant_confidence():
    g = _blob((16, 16), 8, 8)
    rows = mt.roc_curve([np.full((16, 16), 0.3)], [g], np.array([0.5, 0.4]))
    assert [r[1:] for r in rows] == [(0.0, 0.0), (0.0, 0.0)]
    # single degenerate point: only padding spans the axis
    assert mt.auc_from_points([(0.0, 0.0)]) == 0.0
    assert mt.auc_from_points([(0.0, 1.0)]) == 1.0


def test_roc_threshold_validation():
    g = [np.zeros((4, 4), bool)]
    c = [np.zeros((4, 4))]
    with pytest.raises(ValueError):
        mt.roc_curve(c, g, [0.5])
    with pytest.raises(ValueError):
        mt.roc_curve(c, g, [0.5, 0.6, 0.4])
    with pytest.raises(ValueError):
        mt.roc_curve(c, g, [1.5, 0.5])


def test_auc_hand_trapezoid():
    pts = [(0.0, 0.2), (5.0, 0.6), (10.0, 1.0)]
    expect = (0 + 0.2) / 2 * 0 + (0.2 + 0.6) / 2 * 0.5 + (0.6 + 1.0) / 2 * 0.5
    assert np.isclose(mt.auc_from_points(pts), expect)


def test_roc_monotone_for_isolated_symmetric_blobs():
    """With separated, centred blobs the thresholded components nest and stay put.

    Near tau = 0 every pixel passes and the whole image merges into one
    component, so the sweep stops at 0.02.
    """
    yy, xx = np.indices((40, 40))
    conf = np.zeros((40, 40))
    gt = np.zeros((40, 40), bool)
    for cy, cx, a in [(8, 8, 0.9), (25, 30, 0.6), (30, 10, 0.35)]:
        conf = np.maximum(conf, a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 4.0))
        gt |= (yy - cy) ** 2 + (xx - cx) ** 2 <= 2
    conf = np.maximum(conf, 0.5 * np.exp(-((yy - 10) ** 2 + (xx - 28) ** 2) / 4.0))  # a false blob
    rows = mt.roc_curve([conf], [gt], np.linspace(1, 0.02, 50))
    fa = [r[1] for r in rows]
    pd = [r[2] for r in rows]
    # thresholds descend, so both must be non-decreasing along the list
    assert all(b >= a for a, b in zip(fa, fa[1:]))
    assert all(b >= a for a, b in zip(pd, pd[1:]))


def test_random_confidence_auc_chance_band():
    aucs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        gts = [rng.uniform(size=(16, 16)) > 0.9 for _ in range(3)]
        confs = [rng.uniform(size=(16, 16)) for _ in range(3)]
        aucs.append(mt.roc_auc(confs, gts)[1])
    assert 0.3 <= float(np.mean(aucs)) <= 0.7


# --- report ---------------------------------------------------------------


def test_report_invariants_and_csv_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    gts = [rng.uniform(size=(12, 12)) > 0.85 for _ in range(3)]
    confs = [np.clip(g + rng.normal(0, 0.3, g.shape), 0, 1) for g in gts]
    rep = mt.evaluate_masks(confs, gts)
    assert rep.tp + rep.fp + rep.fn + rep.tn == 3 * 144
    assert 0 <= rep.iou <= 1 and 0 <= rep.niou <= 1 and 0 <= rep.pd <= 1 and rep.fa >= 0
    assert len(rep.roc) == 101
    rep.save(tmp_path / "m.csv", tmp_path / "r.csv")
    back = mt.MetricsReport.load(tmp_path / "m.csv", tmp_path / "r.csv")
    assert back == rep
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "metric,value"
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "tau,fa,pd"


def test_report_single_sample_niou_equals_iou():
    rng = np.random.default_rng(3)
    g = rng.uniform(size=(10, 10)) > 0.8
    c = rng.uniform(size=(10, 10))
    rep = mt.evaluate_masks([c], [g], with_roc=False)
    assert rep.iou == rep.niou


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2**16 - 1), st.integers(0, 2**16 - 1)), min_size=1, max_size=4))
def test_pixel_metrics_bounds(pairs):
    p = [np.array([(a >> k) & 1 for k in range(16)], bool).reshape(4, 4) for a, _ in pairs]
    g = [np.array([(b >> k) & 1 for k in range(16)], bool).reshape(4, 4) for _, b in pairs]
    iou, niou = mt.pixel_metrics(p, g)
    assert 0 <= iou <= 1 and 0 <= niou <= 1
