import csv

import numpy as np
import pytest

import oracles
from dpcnet import metrics
from dpcnet.metrics import UndefinedMetricError


def random_pair(rng, n=12):
    """Blobby random masks: thresholded smoothed noise, never empty."""
    from scipy import ndimage

    out = []
    for _ in range(2):
        m = ndimage.gaussian_filter(rng.standard_normal((n, n, n)), 1.5) > rng.uniform(0.0, 0.15)
        if not m.any():
            m[rng.integers(n), rng.integers(n), rng.integers(n)] = True
        out.append(m)
    return out


@pytest.fixture(scope="module")
def pairs():
    rng = np.random.default_rng(2024)
    return [random_pair(rng) for _ in range(100)]


def test_dsc_rvd_exact_against_oracle(pairs):
    for a, b in pairs:
        assert metrics.dsc(a, b) == oracles.dsc(a, b)
        assert metrics.rvd(a, b) == oracles.rvd(a, b)


@pytest.mark.parametrize("chunk", range(4))
def test_surface_distances_against_brute_force(pairs, chunk):
    spacing = (2.47, 1.9, 1.9)
    for a, b in pairs[chunk * 25 : (chunk + 1) * 25]:
        assert abs(metrics.assd(a, b, spacing) - oracles.assd(a, b, spacing)) < 1e-9
        assert abs(metrics.hd95(a, b, spacing) - oracles.hd95(a, b, spacing)) < 1e-9


def test_surface_extraction_against_oracle(pairs):
    for a, _ in pairs[:20]:
        got = sorted(map(tuple, metrics.extract_surface(a, (1, 2, 3)).tolist()))
        assert got == sorted(oracles.surface(a, (1, 2, 3)))


def test_surface_points_are_boundary_voxels():
    m = np.zeros((6, 6, 6), bool)
    m[1:5, 1:5, 1:5] = True
    s = metrics.surface_mask(m)
    assert s.sum() == 64 - 8 and not s[2:4, 2:4, 2:4].any()
    full = np.ones((3, 3, 3), bool)
    assert metrics.surface_mask(full).sum() == 26


def test_symmetry_and_ranges(pairs):
    for a, b in pairs[:30]:
        assert metrics.dsc(a, b) == metrics.dsc(b, a)
        assert metrics.assd(a, b) == pytest.approx(metrics.assd(b, a), abs=1e-12)
        assert metrics.hd95(a, b) == metrics.hd95(b, a)
        assert 0 <= metrics.dsc(a, b) <= 1
        assert 0 <= metrics.assd(a, b) <= metrics.hausdorff(a, b)
        assert metrics.hd95(a, b) <= metrics.hausdorff(a, b)


def test_translation_invariance():
    rng = np.random.default_rng(1)
    a, b = random_pair(rng, 10)
    A, B = np.zeros((16, 16, 16), bool), np.zeros((16, 16, 16), bool)
    A[2:12, 3:13, 1:11], B[2:12, 3:13, 1:11] = a, b
    # keep both masks away from the grid edge so the roll never wraps them
    A, B = A & _interior(A.shape), B & _interior(B.shape)
    A2, B2 = np.roll(A, (3, -2, 4), axis=(0, 1, 2)), np.roll(B, (3, -2, 4), axis=(0, 1, 2))
    for f in (metrics.dsc, metrics.rvd, metrics.assd, metrics.hd95):
        assert f(A, B) == pytest.approx(f(A2, B2), abs=1e-12)


def _interior(shape):
    m = np.zeros(shape, bool)
    m[4:12, 4:12, 4:12] = True
    return m


def test_identical_masks():
    m = np.zeros((8, 8, 8), bool)
    m[2:6, 1:4, 3:7] = True
    assert metrics.dsc(m, m) == 1.0 and metrics.rvd(m, m) == 0.0
    assert metrics.assd(m, m) == 0.0 and metrics.hd95(m, m) == 0.0


def test_shifted_cube_distances():
    a = np.zeros((10, 10, 10), bool)
    a[2:6, 2:6, 2:6] = True
    b = np.roll(a, 1, axis=2)
    assert metrics.hausdorff(a, b) == 1.0
    assert metrics.dsc(a, b) == 2 * 48 / 128


def test_empty_cases():
    e, m = np.zeros((4, 4, 4), bool), np.ones((4, 4, 4), bool)
    assert metrics.dsc(e, e) == 1.0
    assert metrics.dsc(e, m) == 0.0
    with pytest.raises(UndefinedMetricError):
        metrics.rvd(m, e)
    with pytest.raises(UndefinedMetricError):
        metrics.assd(e, m)
    with pytest.raises(UndefinedMetricError):
        metrics.hd95(m, e)
    with pytest.raises(ValueError):
        metrics.dsc(e, np.zeros((4, 4, 5)))


# lesion detection ---------------------------------------------------------------


def _balls(centers, n=20, r=2):
    z, y, x = np.indices((n, n, n))
    out = np.zeros((n, n, n), np.uint8)
    for c in centers:
        out[(z - c[0]) ** 2 + (y - c[1]) ** 2 + (x - c[2]) ** 2 <= r * r] = 2
    return out


def test_lesion_perfect_and_missed():
    gt = _balls([(5, 5, 5), (14, 14, 14)])
    r = metrics.lesion_prf(gt, gt, 2)
    assert (r.precision, r.recall, r.n_pred, r.n_gt) == (1.0, 1.0, 2, 2)
    r = metrics.lesion_prf(_balls([(5, 5, 5)]), gt, 2)
    assert (r.precision, r.recall) == (1.0, 0.5)
    r = metrics.lesion_prf(_balls([(5, 5, 5), (14, 14, 14), (5, 14, 5)]), gt, 2)
    assert r.precision == pytest.approx(2 / 3) and r.recall == 1.0


def test_lesion_overlap_threshold_is_strict():
    gt = np.zeros((4, 4, 4), np.uint8)
    gt[0, 0, :4] = 1
    pred = np.zeros_like(gt)
    pred[0, 0, :2] = 1
    # IoU exactly 0.5 is not a match
    assert metrics.lesion_prf(pred, gt, 1).recall == 0.0
    pred[0, 0, 2] = 1
    assert metrics.lesion_prf(pred, gt, 1).recall == 1.0


def test_lesion_components_are_26_connected():
    gt = np.zeros((5, 5, 5), np.uint8)
    gt[1, 1, 1] = gt[2, 2, 2] = 1
    r = metrics.lesion_prf(gt, gt, 1)
    assert r.n_gt == 1


def test_lesion_greedy_one_to_one():
    gt = np.zeros((3, 3, 12), np.uint8)
    gt[1, 1, 0:6] = 1
    pred = np.zeros_like(gt)
    pred[1, 1, 0:5] = 1
    pred[0, 0, 8:11] = 1
    r = metrics.lesion_prf(pred, gt, 1)
    assert len(r.matches) == 1 and r.matches[0][2] == pytest.approx(5 / 6)


def test_lesion_empty_sets():
    e = np.zeros((4, 4, 4), np.uint8)
    r = metrics.lesion_prf(e, e, 2)
    assert (r.precision, r.recall, r.precision_empty, r.recall_empty) == (1.0, 1.0, True, True)


# CSV ------------------------------------------------------------------------------


def test_report_columns_and_na(tmp_path):
    gt = np.zeros((8, 8, 8), np.uint8)
    gt[2:6, 2:6, 2:6] = 1
    rows = [metrics.evaluate_class("v0", gt, gt, c, (1, 1, 1)) for c in (1, 2)]
    metrics.write_report(tmp_path / "r.csv", rows)
    with open(tmp_path / "r.csv") as fh:
        table = list(csv.reader(fh))
    assert tuple(table[0]) == metrics.CSV_COLUMNS
    assert table[1][:6] == ["v0", "1", "1.0", "0.0", "0.0", "0.0"]
    assert table[2][3:6] == ["NA", "NA", "NA"]
