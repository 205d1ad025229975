"""Grid types and the voxel-level preprocessing applied before synthesis.

Layout is channel-major ``(c, z, y, x)``: a :class:`Volume` holds a
``(C, D, H, W)`` float32 array, a :class:`LabelVolume` a ``(D, H, W)`` uint8
array. Both carry voxel spacing in millimetres. Arrays are made read-only on
construction so a volume can be shared between threads.
"""

from dataclasses import dataclass, field

import numpy as np

DEFAULT_NUM_CLASSES = 9
FINE_CLASSES = tuple(range(1, 9))


def _as_spacing(spacing):
    sp = tuple(float(np.float32(s)) for s in spacing)
    if len(sp) != 3:
        raise ValueError(f"spacing needs 3 components, got {len(sp)}")
    if not all(s > 0 and np.isfinite(s) for s in sp):
        raise ValueError(f"spacing components must be positive and finite, got {sp}")
    return sp


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Volume:
    """Multi-channel real-valued grid.

    ``intensity_range`` is the declared dynamic range ``(lo, hi)`` used as
    ``L = hi - lo`` by SSIM. When omitted it is taken from the data, widened to
    ``(v, v + 1)`` for constant volumes so that ``L`` stays positive.
    """

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    intensity_range: tuple = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 3:
            v = v[None]
        if v.ndim != 4 or min(v.shape) < 1:
            raise ValueError(f"volume values must have shape (C, D, H, W), got {v.shape}")
        v = v.astype(np.float32, copy=True)
        if not np.all(np.isfinite(v)):
            raise ValueError("volume values must be finite")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))
        rng = self.intensity_range
        if rng is None:
            lo, hi = float(v.min()), float(v.max())
            if hi <= lo:
                hi = lo + 1.0
            rng = (lo, hi)
        rng = tuple(float(np.float32(r)) for r in rng)
        if len(rng) != 2 or not all(np.isfinite(rng)):
            raise ValueError(f"intensity range must be two finite reals, got {rng}")
        object.__setattr__(self, "intensity_range", rng)

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def dims(self):
        return tuple(self.values.shape[1:])

    def channel(self, c=0):
        return self.values[c]

    def replace(self, values=None, spacing=None, intensity_range=None):
        return Volume(
            self.values if values is None else values,
            self.spacing if spacing is None else spacing,
            self.intensity_range if intensity_range is None else intensity_range,
        )


@dataclass(frozen=True)
class LabelVolume:
    """Integer label grid, one class id per voxel, ``0`` is background."""

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    num_classes: int = DEFAULT_NUM_CLASSES

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3 or min(lab.shape) < 1:
            raise ValueError(f"labels must have shape (D, H, W), got {lab.shape}")
        if not 1 <= self.num_classes <= 256:
            raise ValueError(f"num_classes must lie in 1..256, got {self.num_classes}")
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise ValueError(f"labels must lie in 0..{self.num_classes - 1}")
        object.__setattr__(self, "labels", _frozen(lab.astype(np.uint8)))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def dims(self):
        return tuple(self.labels.shape)

    def present(self):
        return sorted(int(c) for c in np.unique(self.labels))


@dataclass(frozen=True)
class BinaryChannelMask:
    """One binary channel per declared class id, in declaration order."""

    values: np.ndarray
    classes: tuple = field(default=())

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 4:
            raise ValueError(f"channel mask must have shape (C, D, H, W), got {v.shape}")
        if len(self.classes) != v.shape[0]:
            raise ValueError("one class id per channel required")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("channel mask values must be 0 or 1")
        object.__setattr__(self, "values", _frozen(v.astype(np.uint8)))
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))

    @property
    def dims(self):
        return tuple(self.values.shape[1:])

    def to_labels(self, num_classes=DEFAULT_NUM_CLASSES, spacing=(1.0, 1.0, 1.0)):
        """Map back to class ids; voxels with no channel set become background."""
        out = np.zeros(self.dims, dtype=np.uint8)
        hit = self.values.any(axis=0)
        ids = np.asarray(self.classes, dtype=np.uint8)
        out[hit] = ids[np.argmax(self.values, axis=0)[hit]]
        return LabelVolume(out, spacing, num_classes)


def binarize(mask, classes):
    """Channel-wise binarisation: channel ``j`` is ``mask == classes[j]``."""
    classes = [int(c) for c in classes]
    if not classes:
        raise ValueError("class list must be non-empty")
    if len(set(classes)) != len(classes):
        raise ValueError(f"duplicate class ids in {classes}")
    bad = [c for c in classes if not 0 <= c < mask.num_classes]
    if bad:
        raise ValueError(f"unknown class ids {bad} for num_classes={mask.num_classes}")
    ids = np.asarray(classes, dtype=np.uint8)[:, None, None, None]
    return BinaryChannelMask((mask.labels[None] == ids).astype(np.uint8), classes)


def filter_fine_grained(mask, fine_classes=FINE_CLASSES):
    """Zero every voxel whose label is not in ``fine_classes``."""
    keep = np.isin(mask.labels, np.asarray(sorted(set(fine_classes)), dtype=np.int64))
    return LabelVolume(np.where(keep, mask.labels, 0), mask.spacing, mask.num_classes)


def _linear_weights(n_in, n_out):
    # voxel-centre alignment: output i samples input coordinate (i+0.5)*n_in/n_out - 0.5
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def _nearest_index(n_in, n_out):
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resample_array(a, target_dims, mode="trilinear"):
    """Resample the last three axes of ``a`` to ``target_dims``."""
    out = a
    for k, n_out in enumerate(target_dims):
        axis = a.ndim - 3 + k
        n_in = a.shape[axis]
        if n_in == n_out:
            continue
        if mode == "nearest":
            out = np.take(out, _nearest_index(n_in, n_out), axis=axis)
        else:
            lo, hi, w = _linear_weights(n_in, n_out)
            shape = [1] * out.ndim
            shape[axis] = n_out
            w = w.reshape(shape)
            a_lo = np.take(out, lo, axis=axis)
            out = a_lo + (np.take(out, hi, axis=axis) - a_lo) * w
    return out


def resample(vol, target_dims, mode="trilinear"):
    """Resample a volume or label volume to ``target_dims``.

    Label volumes only accept ``mode="nearest"``. Spacing is rescaled so the
    physical extent is preserved. Equal dims return a bitwise copy.
    """
    target_dims = tuple(int(n) for n in target_dims)
    if len(target_dims) != 3 or min(target_dims) < 1:
        raise ValueError(f"target_dims must be three positive ints, got {target_dims}")
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    spacing = tuple(s * n / m for s, n, m in zip(vol.spacing, vol.dims, target_dims))
    if isinstance(vol, LabelVolume):
        if mode != "nearest":
            raise ValueError("label volumes can only be resampled with mode='nearest'")
        labels = resample_array(vol.labels, target_dims, "nearest")
        return LabelVolume(labels, spacing, vol.num_classes)
    if mode == "nearest":
        values = resample_array(vol.values, target_dims, "nearest")
    else:
        values = resample_array(vol.values.astype(np.float64), target_dims, "trilinear")
    return Volume(values, spacing, vol.intensity_range)


def crop(vol, size, policy="centered", seed=0):
    """Crop the spatial axes to ``size`` (centered or seeded random offsets)."""
    from structvol.rng import generator

    size = tuple(int(s) for s in size)
    dims = vol.dims
    if any(s > d for s, d in zip(size, dims)):
        raise ValueError(f"crop {size} larger than volume {dims}")
    if policy == "centered":
        start = [(d - s) // 2 for d, s in zip(dims, size)]
    elif policy == "random":
        g = generator(seed)
        start = [int(g.integers(0, d - s + 1)) for d, s in zip(dims, size)]
    else:
        raise ValueError(f"unknown crop policy {policy!r}")
    sl = tuple(slice(a, a + s) for a, s in zip(start, size))
    if isinstance(vol, LabelVolume):
        return LabelVolume(vol.labels[sl], vol.spacing, vol.num_classes)
    return Volume(vol.values[(slice(None),) + sl], vol.spacing, vol.intensity_range)
