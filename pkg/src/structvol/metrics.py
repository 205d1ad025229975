"""Image similarity and overlap metrics.

SSIM is windowed in 3D: uniform ``w^3`` windows at stride 1 over the valid
region (no padding), population statistics per window, averaged over all
windows. FID and LPIPS need pretrained feature networks and are not
provided; :func:`evaluate` reports them as unavailable.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from structvol.volume import LabelVolume, Volume

K1, K2 = 0.01, 0.03
UNAVAILABLE = ("fid", "lpips")


@dataclass(frozen=True)
class SsimConfig:
    window: int = 7
    k1: float = K1
    k2: float = K2
    data_range: float = None  # L; defaults to the first volume's declared range

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"SSIM window must be odd and >= 1, got {self.window}")


def _array(x):
    if isinstance(x, Volume):
        if x.channels != 1:
            raise ValueError("metrics take single-channel volumes")
        return x.values[0].astype(np.float64)
    if isinstance(x, LabelVolume):
        return x.labels.astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def _same_dims(a, b):
    if a.shape != b.shape:
        raise ValueError(f"dims differ: {a.shape} vs {b.shape}")


def _window_sum(a, w):
    """Sum over every ``w^3`` window fully inside ``a`` (summed-area table)."""
    s = np.pad(a, ((1, 0), (1, 0), (1, 0))).cumsum(0).cumsum(1).cumsum(2)
    return (
        s[w:, w:, w:] - s[:-w, w:, w:] - s[w:, :-w, w:] - s[w:, w:, :-w]
        + s[:-w, :-w, w:] + s[:-w, w:, :-w] + s[w:, :-w, :-w] - s[:-w, :-w, :-w]
    )


def ssim_map(x, y, cfg=SsimConfig()):
    xa, ya = _array(x), _array(y)
    _same_dims(xa, ya)
    w = cfg.window
    if min(xa.shape) < w:
        raise ValueError(f"volume {xa.shape} smaller than SSIM window {w}")
    if cfg.data_range is not None:
        L = float(cfg.data_range)
    elif isinstance(x, Volume):
        L = x.intensity_range[1] - x.intensity_range[0]
    elif isinstance(x, LabelVolume):
        L = float(x.num_classes - 1)
    else:
        L = float(max(xa.max(), ya.max()) - min(xa.min(), ya.min())) or 1.0
    if not L > 0:
        raise ValueError(f"dynamic range must be positive, got {L}")
    c1, c2 = (cfg.k1 * L) ** 2, (cfg.k2 * L) ** 2
    n = float(w ** 3)
    # centre before the summed-area tables to limit cancellation in the variances
    x0, y0 = xa.mean(), ya.mean()
    xc, yc = xa - x0, ya - y0
    mxc, myc = _window_sum(xc, w) / n, _window_sum(yc, w) / n
    vx = _window_sum(xc * xc, w) / n - mxc * mxc
    vy = _window_sum(yc * yc, w) / n - myc * myc
    cov = _window_sum(xc * yc, w) / n - mxc * myc
    mx, my = mxc + x0, myc + y0
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return num / den


def ssim(x, y, cfg=SsimConfig()):
    """Mean windowed SSIM; ``x`` supplies the dynamic range unless configured."""
    return float(ssim_map(x, y, cfg).mean())


def rmse(x, y):
    xa, ya = _array(x), _array(y)
    _same_dims(xa, ya)
    d = xa - ya
    return float(np.sqrt(np.mean(d * d)))


def _binary(p):
    if isinstance(p, Volume):
        return _array(p) != 0
    a = p.labels if hasattr(p, "labels") else np.asarray(p)
    return a != 0


def dice(p, q):
    """``2|P & Q| / (|P| + |Q|)``, 1 when both are empty."""
    pa, qa = _binary(p), _binary(q)
    _same_dims(pa, qa)
    denom = int(pa.sum()) + int(qa.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pa & qa).sum()) / denom


def dilate(q, radius=1):
    """Dilation by the ``(2r+1)^3`` cube (``radius`` 26-neighbourhood steps)."""
    qa = _binary(q)
    if radius < 1:
        raise ValueError(f"dilation radius must be >= 1, got {radius}")
    return ndimage.binary_dilation(qa, structure=ndimage.generate_binary_structure(3, 3), iterations=radius)


def rdice(p, q, dilation_radius=1):
    """Dice after clipping the prediction to the dilated ground truth."""
    pa, qa = _binary(p), _binary(q)
    _same_dims(pa, qa)
    p_clip = pa & dilate(qa, dilation_radius)
    denom = int(p_clip.sum()) + int(qa.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p_clip & qa).sum()) / denom


METRICS = ("ssim", "rmse", "dice", "rdice")


def evaluate(pred, gt, names=METRICS, ssim_cfg=SsimConfig(), dilation_radius=1):
    """Compute the requested metrics; image metrics need volumes, overlap metrics masks.

    Unsupported names (``fid``, ``lpips``) map to ``"unavailable"``.
    """
    out = {}
    for name in names:
        if name == "ssim":
            out[name] = ssim(pred, gt, ssim_cfg)
        elif name == "rmse":
            out[name] = rmse(pred, gt)
        elif name == "dice":
            out[name] = dice(pred, gt)
        elif name == "rdice":
            out[name] = rdice(pred, gt, dilation_radius)
        elif name in UNAVAILABLE:
            out[name] = "unavailable"
        else:
            raise ValueError(f"unknown metric {name!r}")
    return out
