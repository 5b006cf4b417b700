import csv
import math
import shutil

import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from cwdm.data import MODALITIES, SubjectRecord, save_volume, write_manifest
from cwdm.metrics import (
    CaseMetrics,
    MetricsReport,
    center_crop,
    evaluate_split,
    mse,
    psnr,
    score,
    ssim,
)

C1, C2 = 0.01**2, 0.03**2


def ssim_oracle(a, b, sigma=1.5, radius=3):
    """Explicit weighted-window SSIM over every fully-contained 7x7x7 window."""
    x = np.arange(-radius, radius + 1)
    g1 = np.exp(-(x**2) / (2 * sigma**2))
    g1 /= g1.sum()
    w = g1[:, None, None] * g1[None, :, None] * g1[None, None, :]
    wa = sliding_window_view(a, w.shape)
    wb = sliding_window_view(b, w.shape)
    axes = (-3, -2, -1)
    mu_a = (wa * w).sum(axes)
    mu_b = (wb * w).sum(axes)
    va = (wa**2 * w).sum(axes) - mu_a**2
    vb = (wb**2 * w).sum(axes) - mu_b**2
    cov = (wa * wb * w).sum(axes) - mu_a * mu_b
    s = (2 * mu_a * mu_b + C1) * (2 * cov + C2) / ((mu_a**2 + mu_b**2 + C1) * (va + vb + C2))
    return s.mean()


def test_identity():
    a = np.random.default_rng(0).random((8, 8, 8))
    assert (mse(a, a), psnr(a, a), ssim(a, a)) == (0.0, 100.0, 1.0)


def test_psnr_thirty_db():
    a = np.zeros((8, 8, 8))
    b = np.full((8, 8, 8), math.sqrt(1e-3))
    assert mse(a, b) == pytest.approx(1e-3, rel=1e-12)
    assert psnr(a, b) == pytest.approx(30.0, abs=1e-9)


def test_constant_offset_pair():
    a, b = np.full((10, 10, 10), 0.5), np.full((10, 10, 10), 0.6)
    assert mse(a, b) == pytest.approx(0.01, abs=1e-15)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)
    # flat images: variance terms vanish, only the luminance factor is left
    closed = (2 * 0.5 * 0.6 + C1) / (0.5**2 + 0.6**2 + C1)
    assert ssim(a, b) == pytest.approx(closed, abs=1e-9)
    assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-9)


def test_ssim_matches_window_oracle(rng):
    a = rng.random((12, 11, 13))
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-10)


def test_psnr_relation_random_pairs(rng):
    for _ in range(100):
        a, b = rng.random((8, 8, 8)), rng.random((8, 8, 8))
        assert psnr(a, b) == pytest.approx(-10 * math.log10(mse(a, b)), abs=1e-9)


def test_symmetry_and_range(rng):
    for _ in range(10):
        a, b = rng.random((9, 9, 9)), rng.random((9, 9, 9)) ** 3
        assert mse(a, b) == mse(b, a)
        assert psnr(a, b) == psnr(b, a)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
        assert -1 <= ssim(a, b) <= 1
    assert -1 <= ssim(a, 1 - a) < 0


def test_errors():
    with pytest.raises(ValueError, match="shape"):
        mse(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(ValueError, match="empty"):
        psnr(np.zeros((0, 2, 2)), np.zeros((0, 2, 2)))
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((4, 8, 8)), np.ones((4, 8, 8)))
    with pytest.raises(ValueError, match="crop_mode"):
        score(np.zeros((8, 8, 8)), np.zeros((8, 8, 8)), "cropped_200")


def test_center_crop_brats_grid():
    v = np.zeros((155, 240, 240), dtype=np.float32)
    v[:, 8:232, 8:232] = 1.0
    c = center_crop(v)
    assert c.shape == (155, 224, 224)
    assert np.all(c == 1.0)


def test_cropped_mode_ignores_border(rng):
    truth = rng.random((155, 240, 240)).astype(np.float32)
    pred = truth.copy()
    pred[:, :8] = 0.0  # damage only the rim that the crop removes
    assert score(pred, truth, "cropped_224") == {"mse": 0.0, "psnr": 100.0, "ssim": 1.0}
    assert score(pred, truth, "full")["mse"] > 0


def test_aggregates_match_independent_pass(rng):
    rows = [CaseMetrics(f"c{i}", MODALITIES[i % 4], *rng.random(3)) for i in range(11)]
    report = MetricsReport(rows)
    agg = report.aggregates
    assert list(agg) == ["T1", "T1ce", "T2", "FLAIR", "Random"]
    for m in MODALITIES:
        sel = [r for r in rows if r.modality == m]
        assert agg[m]["n"] == len(sel)
        assert agg[m]["ssim"] == pytest.approx(sum(r.ssim for r in sel) / len(sel), rel=1e-14)
    assert agg["Random"]["mse"] == pytest.approx(sum(r.mse for r in rows) / 11, rel=1e-14)


@pytest.fixture
def split(tmp_path, rng):
    """Three cases with ground truth on disk and identical predictions."""
    gt, pred, recs = tmp_path / "gt", tmp_path / "pred", []
    for i, m in enumerate(("FLAIR", "T1", "T2")):
        case = f"C{i}"
        paths = {code: save_volume(gt / case / f"{case}-{code}.nii.gz", rng.random((8, 8, 8))) for code in MODALITIES}
        recs.append(SubjectRecord(case, paths, m, "pseudo-val", paths[m]))
        suffix = {"FLAIR": "t2f", "T1": "t1n", "T2": "t2w"}[m]
        (pred / case).mkdir(parents=True)
        shutil.copy(paths[m], pred / case / f"{case}-{suffix}.nii.gz")
    return pred, write_manifest(recs, tmp_path / "manifest.tsv")


def test_evaluate_identical_predictions(split, tmp_path):
    pred, manifest = split
    report = evaluate_split(pred, manifest, preprocess=None)
    assert not report.missing and len(report.per_case) == 3
    for r in report.per_case:
        assert (r.mse, r.psnr, r.ssim) == (0.0, 100.0, 1.0)
    table, rows = report.write(tmp_path / "out")
    assert "crop_mode=full" in table.read_text() and "window=7" in table.read_text()
    with open(rows) as fh:
        parsed = list(csv.DictReader(fh))
    assert [r["case_id"] for r in parsed] == ["C0", "C1", "C2"]
    assert list(parsed[0]) == ["case_id", "modality", "mse", "psnr", "ssim"]


def test_evaluate_missing_prediction(split):
    pred, manifest = split
    shutil.rmtree(pred / "C1")
    report = evaluate_split(pred, manifest, preprocess=None, workers=2)
    assert report.missing == ["C1"]
    assert [r.case_id for r in report.per_case] == ["C0", "C2"]
    assert "missing predictions: C1" in report.render_table()
