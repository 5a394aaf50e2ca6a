import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from antiforensics import metrics
from antiforensics.metrics import (
    EvalReport,
    ImageRow,
    attack_rate,
    binarize,
    f1_reverse,
    glcm,
    glcm_diff_histogram,
    glcm_property,
    perturbation_stats,
    pixel_f1,
    psnr,
    ssim,
)

import oracles


def test_binarize_threshold():
    assert binarize(np.array([0.51]))[0] == 1
    assert binarize(np.array([0.5]))[0] == 0
    rng = np.random.default_rng(0)
    p = rng.uniform(size=(7, 9))
    expected = [[1 if p[i, j] > 0.5 else 0 for j in range(9)] for i in range(7)]
    assert binarize(p).tolist() == expected


def test_f1_examples():
    gt = np.array([[1, 0], [0, 0]])
    assert pixel_f1(gt, gt) == 1.0
    assert pixel_f1(np.array([[1, 1], [0, 0]]), gt) == pytest.approx(2 / 3)
    assert oracles.f1([[1, 1], [0, 0]], gt.tolist()) == pytest.approx(2 / 3)
    assert pixel_f1(np.zeros((2, 2)), gt) == 0.0


def test_f1_degenerate_rules():
    z = np.zeros((3, 3))
    assert pixel_f1(z, z) == 1.0
    assert pixel_f1(np.ones((3, 3)), z) == 0.0


def test_attack_rate_examples():
    assert attack_rate(0.8, 0.2) == pytest.approx(0.75)
    assert attack_rate(0.37, 0.37) == 0.0
    assert attack_rate(0.5, 0.0) == 1.0
    assert attack_rate(0.4, 0.6) < 0
    with pytest.raises(ValueError):
        attack_rate(0.0, 0.1)


def test_f1_reverse_examples():
    rng = np.random.default_rng(1)
    gt = (rng.uniform(size=(6, 6)) > 0.5).astype(np.uint8)
    gt[0, 0], gt[0, 1] = 1, 0
    assert f1_reverse(1 - gt, gt) == 1.0
    # pred = gt: the inverted prediction has no overlap with gt
    tp, fp, fn = oracles.counts((1 - gt).tolist(), gt.tolist())
    assert tp == 0
    assert f1_reverse(gt, gt) == oracles.f1((1 - gt).tolist(), gt.tolist()) == 0.0
    half = np.zeros((4, 4), np.uint8)
    half[:2] = 1
    assert f1_reverse(np.ones((4, 4)), half) == pixel_f1(np.zeros((4, 4)), half) == 0.0


def test_psnr_examples():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(8, 8, 3))
    assert psnr(a, a) == 99.0
    base = np.round(rng.uniform(0.1, 0.9, size=(8, 8, 3)) * 255) / 255
    assert psnr(base, base + 1 / 255) == pytest.approx(20 * math.log10(255), abs=1e-9)
    assert psnr(base, base + 1 / 255) == pytest.approx(48.13, abs=0.01)
    b = rng.uniform(size=(8, 8, 3))
    assert psnr(a, b) == psnr(b, a)


def test_ssim_constant_images_closed_form():
    a = np.full((16, 16), 0.0)
    b = np.full((16, 16), 128 / 255)
    # constant windows: variances and covariance vanish, only the luminance term remains
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    expected = (2 * 0 * 128 + c1) * c2 / ((0 + 128**2 + c1) * c2)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-9)


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(20, 20, 3))
    b = np.clip(a + rng.normal(0, 0.05, size=a.shape), 0, 1)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= ssim(a, b) <= 1


def test_glcm_examples():
    assert glcm_property(np.full((8, 8), 0.4)) == 0.0
    board = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert glcm_property(board, levels=2, offset=(0, 1)) == pytest.approx(1.0)
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(10, 10))
    step = 1 / 32
    q = np.floor(a * 32) / 32  # a lower representative of every bin
    b = q + step * 0.3
    assert np.array_equal(glcm(a), glcm(np.clip(b, 0, 1)))


def test_glcm_probabilities_sum_to_one():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = glcm(rng.uniform(size=(12, 12, 3)))
        assert abs(p.sum() - 1.0) <= 1e-9
        assert np.allclose(p, p.T)


def test_glcm_diff_histogram():
    rng = np.random.default_rng(6)
    imgs = [rng.uniform(size=(24, 24, 3)) for _ in range(5)]
    h = glcm_diff_histogram([(x, x) for x in imgs])
    assert h.counts.sum() == 5
    zero_bin = np.searchsorted(h.edges, 0.0, side="right") - 1
    assert h.counts[zero_bin] == 5
    assert len(h.edges) == len(h.counts) + 1


def test_glcm_diff_histogram_blur_is_positive(tmp_path):
    from scipy import ndimage

    rng = np.random.default_rng(7)
    pairs = []
    for _ in range(10):
        x = rng.uniform(size=(32, 32, 3))
        pairs.append((x, ndimage.uniform_filter(x, size=(3, 3, 1))))
    h = glcm_diff_histogram(pairs)
    assert (h.values > 0).all()
    assert h.counts.sum() == 10
    h.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "bin_left,bin_right,count"


def test_perturbation_stats_examples():
    mask = np.zeros((4, 4), np.uint8)
    mask[:2] = 1
    z = perturbation_stats(np.zeros((4, 4, 3)), mask)
    assert z == {"mean_t": 0.0, "var_t": 0.0, "mean_p": 0.0, "var_p": 0.0}
    c = perturbation_stats(np.full((4, 4, 3), -0.02), mask)
    assert c["mean_t"] == pytest.approx(255 * 0.02) and c["mean_p"] == pytest.approx(255 * 0.02)
    assert c["var_t"] == pytest.approx(0, abs=1e-20) and c["var_p"] == pytest.approx(0, abs=1e-20)


def test_perturbation_stats_two_pass_oracle():
    rng = np.random.default_rng(8)
    d = rng.normal(0, 0.01, size=(4, 4, 3))
    m = (rng.uniform(size=(4, 4)) > 0.5).astype(np.uint8)
    m[0, 0], m[0, 1] = 1, 0
    got = perturbation_stats(d, m)
    for tag, want in (("t", 1), ("p", 0)):
        vals = [abs(d[i, j, k]) * 255 for i in range(4) for j in range(4) for k in range(3) if m[i, j] == want]
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        assert got[f"mean_{tag}"] == pytest.approx(mean, rel=1e-12)
        assert got[f"var_{tag}"] == pytest.approx(var, rel=1e-9)


def test_perturbation_stats_empty_region_is_absent():
    s = perturbation_stats(np.ones((3, 3, 3)), np.zeros((3, 3)))
    assert s["mean_t"] is None and s["var_t"] is None
    assert s["mean_p"] == 255.0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_f1_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pred = (rng.uniform(size=(6, 6)) > 0.5).astype(np.uint8)
    gt = (rng.uniform(size=(6, 6)) > 0.5).astype(np.uint8)
    perm = rng.permutation(36)
    assert pixel_f1(pred, gt) == pixel_f1(pred.ravel()[perm], gt.ravel()[perm])


def test_report_aggregates_and_round_trip(tmp_path):
    rows = [
        ImageRow("a", 0.8, 0.2, 0.1, 40.0, 0.95),
        ImageRow("b", 0.6, 0.3, 0.2, 42.0, 0.97),
        ImageRow("c", 0.0, 0.0, 0.5, 44.0, 0.99),
    ]
    rep = EvalReport("bim", "sup", "whitebox", "toy", rows)
    agg = rep.aggregates
    assert agg["n_excluded"] == 1
    assert agg["attack_rate"] == pytest.approx(attack_rate(0.7, 0.25))
    assert agg["mean_psnr"] == pytest.approx(42.0)
    rep.write(tmp_path)
    back = EvalReport.read(tmp_path)
    assert back.aggregates == agg
    assert [r.id for r in back.rows] == ["a", "b", "c"]
