import numpy as np
import pytest

from structvol.volume import (
    LabelVolume, Volume, binarize, crop, filter_fine_grained, resample, resample_array,
)


def test_volume_is_float32_and_read_only():
    v = Volume(np.arange(8, dtype=np.float64).reshape(2, 2, 2))
    assert v.values.dtype == np.float32 and v.values.shape == (1, 2, 2, 2)
    with pytest.raises(ValueError):
        v.values[0, 0, 0, 0] = 1.0


def test_constant_volume_gets_positive_range():
    v = Volume(np.full((1, 2, 2, 2), 3.0))
    assert v.intensity_range == (3.0, 4.0)


@pytest.mark.parametrize("bad", [np.zeros((2, 2)), np.full((1, 2, 2, 2), np.nan)])
def test_volume_rejects_bad_values(bad):
    with pytest.raises(ValueError):
        Volume(bad)


def test_volume_rejects_bad_spacing():
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 2, 2, 2)), spacing=(1.0, 0.0, 1.0))


def test_label_range_checked():
    with pytest.raises(ValueError):
        LabelVolume(np.full((2, 2, 2), 9), num_classes=9)


def test_binarize_small_case():
    m = LabelVolume(np.array([[[0], [1]], [[2], [0]]]))
    b = binarize(m, [1, 2]).values
    np.testing.assert_array_equal(b[0, :, :, 0], [[0, 1], [0, 0]])
    np.testing.assert_array_equal(b[1, :, :, 0], [[0, 0], [1, 0]])


def test_binarize_background_only():
    b = binarize(LabelVolume(np.zeros((3, 3, 3))), [1])
    assert b.values.shape == (1, 3, 3, 3) and not b.values.any()


def test_binarize_one_hot_brute_force(rs):
    lab = rs.integers(0, 9, (8, 8, 8))
    b = binarize(LabelVolume(lab), range(1, 9)).values
    for idx in np.ndindex(lab.shape):
        expect = np.zeros(8)
        if lab[idx]:
            expect[lab[idx] - 1] = 1
        np.testing.assert_array_equal(b[(slice(None),) + idx], expect)
    np.testing.assert_array_equal(b.sum(0), lab != 0)


def test_binarize_roundtrip_to_labels(rs):
    lab = rs.integers(0, 9, (5, 4, 3))
    m = LabelVolume(lab)
    np.testing.assert_array_equal(binarize(m, range(1, 9)).to_labels().labels, lab)


def test_binarize_rejects_duplicates_and_unknown():
    m = LabelVolume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        binarize(m, [1, 1])
    with pytest.raises(ValueError):
        binarize(m, [9])


def test_filter_fine_grained():
    lab = np.array([0, 1, 5, 9, 12, 8]).reshape(1, 2, 3)
    m = LabelVolume(lab, num_classes=13)
    np.testing.assert_array_equal(filter_fine_grained(m).labels.ravel(), [0, 1, 5, 0, 0, 8])
    np.testing.assert_array_equal(filter_fine_grained(m, range(13)).labels, lab)
    assert not filter_fine_grained(m, []).labels.any()


def test_resample_constant_and_identity(rs):
    v = Volume(np.full((1, 4, 5, 6), 2.5))
    r = resample(v, (7, 3, 9))
    assert np.all(r.values == 2.5)
    w = Volume(rs.normal(size=(2, 4, 5, 6)))
    same = resample(w, (4, 5, 6))
    assert same.values.tobytes() == w.values.tobytes()


def test_resample_linear_ramp_probe_points():
    # f = i + 2j + 3k on 4^3, upsampled to 8^3 with voxel-centre alignment
    i, j, k = np.indices((4, 4, 4), dtype=np.float64)
    f = i + 2 * j + 3 * k
    out = resample_array(f, (8, 8, 8))

    def src(o):
        return min(max((o + 0.5) / 2 - 0.5, 0.0), 3.0)

    for p in [(0, 0, 0), (1, 2, 3), (7, 7, 7), (3, 4, 5), (6, 1, 0), (2, 2, 2), (5, 7, 1), (4, 0, 6)]:
        expect = src(p[0]) + 2 * src(p[1]) + 3 * src(p[2])
        assert out[p] == pytest.approx(expect, abs=1e-12)


def test_resample_rescales_spacing_and_labels_need_nearest():
    m = LabelVolume(np.ones((4, 4, 4)), spacing=(1, 2, 3))
    r = resample(m, (8, 2, 4), "nearest")
    assert r.spacing == (0.5, 4.0, 3.0)
    assert np.all(r.labels == 1)
    with pytest.raises(ValueError):
        resample(m, (8, 8, 8))


def test_crop_centered_and_random():
    v = Volume(np.arange(6 * 6 * 6, dtype=float).reshape(1, 6, 6, 6))
    c = crop(v, (2, 2, 2))
    np.testing.assert_array_equal(c.values[0], v.values[0, 2:4, 2:4, 2:4])
    a, b = crop(v, (3, 3, 3), "random", seed=4), crop(v, (3, 3, 3), "random", seed=4)
    assert a.values.tobytes() == b.values.tobytes()
    with pytest.raises(ValueError):
        crop(v, (7, 1, 1))
