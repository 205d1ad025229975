import numpy as np
import pytest
from skimage.metrics import structural_similarity

from structvol import metrics as M
from structvol.volume import LabelVolume, Volume


def test_ssim_matches_skimage(rs):
    x = rs.normal(size=(10, 11, 12))
    y = x + 0.5 * rs.normal(size=x.shape)
    ref_map = structural_similarity(x, y, win_size=7, data_range=4.0, use_sample_covariance=False, full=True)[1]
    # skimage pads with reflection; compare on the valid interior only
    ours = M.ssim_map(x, y, M.SsimConfig(data_range=4.0))
    np.testing.assert_allclose(ours, ref_map[3:-3, 3:-3, 3:-3], rtol=1e-9, atol=1e-12)


def test_ssim_identity_and_constants(rs):
    x = Volume(rs.normal(size=(1, 8, 8, 8)))
    assert M.ssim(x, x) == 1.0
    a, b, L = 0.3, 0.8, 1.0
    c1 = (0.01 * L) ** 2
    val = M.ssim(np.full((7, 7, 7), a), np.full((7, 7, 7), b), M.SsimConfig(data_range=L))
    assert val == pytest.approx((2 * a * b + c1) / (a * a + b * b + c1), rel=1e-12)
    z = np.zeros((7, 7, 7))
    assert M.ssim(z, z, M.SsimConfig(data_range=1.0)) == 1.0


def test_ssim_brute_force_window(rs):
    x, y = rs.random((8, 8, 8)), rs.random((8, 8, 8))
    L = 1.0
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for i, j, k in np.ndindex(2, 2, 2):
        wx, wy = x[i:i + 7, j:j + 7, k:k + 7], y[i:i + 7, j:j + 7, k:k + 7]
        mx, my = wx.mean(), wy.mean()
        cov = ((wx - mx) * (wy - my)).mean()
        vals.append((2 * mx * my + c1) * (2 * cov + c2) / ((mx ** 2 + my ** 2 + c1) * (wx.var() + wy.var() + c2)))
    assert M.ssim(x, y, M.SsimConfig(data_range=L)) == pytest.approx(np.mean(vals), rel=1e-10)


def test_ssim_errors():
    with pytest.raises(ValueError):
        M.ssim(np.zeros((5, 8, 8)), np.zeros((5, 8, 8)))
    with pytest.raises(ValueError):
        M.SsimConfig(window=4)
    with pytest.raises(ValueError):
        M.ssim(np.zeros((8, 8, 8)), np.zeros((8, 8, 9)))


def test_rmse_examples(rs):
    x = rs.normal(size=(3, 4, 5))
    assert M.rmse(x, x) == 0.0
    assert M.rmse(x, x + 2.5) == pytest.approx(2.5)
    assert M.rmse(np.array([[[0.0, 0.0]]]), np.array([[[3.0, 4.0]]])) == pytest.approx(np.sqrt(12.5))
    with pytest.raises(ValueError):
        M.rmse(np.zeros((1, 1, 2)), np.zeros((1, 2, 1)))


def test_dice_examples():
    p = np.zeros((4, 4, 4), bool)
    p[0, 0, :4] = True
    q = np.zeros_like(p)
    q[0, 0, 2:4] = q[1, 1, 0:2] = True
    assert M.dice(p, p) == 1.0
    assert M.dice(p, np.roll(p, 2, axis=0)) == 0.0
    assert M.dice(p, q) == 0.5
    assert M.dice(np.zeros_like(p), np.zeros_like(p)) == 1.0
    with pytest.raises(ValueError):
        M.dice(p, p[:2])


def test_rdice_example():
    q = np.zeros((6, 6, 6), bool)
    q[2, 2, 2] = q[2, 2, 3] = True
    p = np.zeros_like(q)
    p[2, 2, 2] = p[5, 5, 0] = True
    assert M.dice(p, q) == 0.5
    assert M.rdice(p, q) == pytest.approx(2 / 3)
    assert M.rdice(q, q) == 1.0


def brute_rdice(p, q, r):
    pts_q = np.argwhere(q)
    qd = np.zeros_like(q)
    for v in np.ndindex(q.shape):
        if len(pts_q) and np.abs(pts_q - np.array(v)).max(axis=1).min() <= r:
            qd[v] = True
    pc = p & qd
    den = pc.sum() + q.sum()
    return 1.0 if den == 0 else 2 * (pc & q).sum() / den


def test_rdice_brute_force_and_bounds(rs):
    for r in (1, 2):
        for _ in range(10):
            p, q = rs.random((6, 6, 6)) < 0.1, rs.random((6, 6, 6)) < 0.1
            assert M.rdice(p, q, r) == pytest.approx(brute_rdice(p, q, r))
            assert M.rdice(p, q, r) >= M.dice(p, q)
            assert M.dice(p, q) == M.dice(q, p)


def test_metrics_accept_volumes_and_labels():
    lab = LabelVolume(np.eye(8, dtype=np.uint8)[None].repeat(8, 0))
    vol = Volume(lab.labels[None].astype(float))
    assert M.dice(lab, vol) == 1.0
    assert M.ssim(lab, lab) == 1.0


def test_evaluate_reports_unavailable(rs):
    x = rs.normal(size=(8, 8, 8))
    out = M.evaluate(x, x, ("rmse", "fid", "lpips"))
    assert out == {"rmse": 0.0, "fid": "unavailable", "lpips": "unavailable"}
    with pytest.raises(ValueError):
        M.evaluate(x, x, ("hausdorff",))
