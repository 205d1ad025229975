"""Training-free mask deformation.

A fine-grained label mask is split per class, each class is pulled back
through an affine matrix plus a smooth random displacement field using
nearest-neighbour lookup, and the result is repaired with a 2x2x2 max-pool.
Nearest-neighbour pull-back is what tears thin tubes apart into diagonal
staircases; the max-pool turns any 26-connected staircase back into a
6-connected one.

Coordinates are array-index order ``(a0, a1, a2)`` = ``(z, y, x)``. Rotation
angle ``i`` turns about array axis ``i`` with the right-hand rule, so angle 2
maps ``e0`` to ``e1``.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from structvol import rng
from structvol.volume import LabelVolume


@dataclass(frozen=True)
class AffineParams:
    rotation: tuple = (0.0, 0.0, 0.0)  # radians about axes 0, 1, 2
    scale: tuple = (1.0, 1.0, 1.0)
    shear: tuple = (0.0, 0.0, 0.0)  # a0 += s0*a1, a0 += s1*a2, a1 += s2*a2
    translation: tuple = (0.0, 0.0, 0.0)  # voxels

    def __post_init__(self):
        for name in ("rotation", "scale", "shear", "translation"):
            val = tuple(float(x) for x in getattr(self, name))
            if len(val) != 3 or not all(np.isfinite(val)):
                raise ValueError(f"{name} must be three finite reals, got {val}")
            object.__setattr__(self, name, val)
        if not all(s > 0 for s in self.scale):
            raise ValueError(f"scale factors must be positive, got {self.scale}")


@dataclass(frozen=True)
class NonRigidParams:
    alpha: float = 0.0  # max displacement per component, voxels
    zeta: int = 4  # control-grid spacing, voxels

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if int(self.zeta) != self.zeta or self.zeta < 2:
            raise ValueError(f"zeta must be an integer >= 2, got {self.zeta}")
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "zeta", int(self.zeta))


@dataclass(frozen=True)
class DeformationField:
    omega: np.ndarray  # 4x4 homogeneous affine, voxel coordinates
    psi: np.ndarray  # (3, D, H, W) displacement, voxels

    def __post_init__(self):
        if self.omega.shape != (4, 4):
            raise ValueError("omega must be 4x4")
        if abs(np.linalg.det(self.omega[:3, :3])) <= 1e-8:
            raise ValueError("omega is not invertible")
        if self.psi.ndim != 4 or self.psi.shape[0] != 3 or not np.all(np.isfinite(self.psi)):
            raise ValueError("psi must be a finite (3, D, H, W) field")


@dataclass(frozen=True)
class DeformationRanges:
    """Sampling ranges for random MGM parameters (all bounds inclusive)."""

    max_rotation_deg: float = 10.0
    scale: tuple = (0.9, 1.1)
    max_shear: float = 0.05
    max_translation: float = 5.0
    max_alpha: float = 3.0
    zetas: tuple = (4, 8)

    def validate(self):
        errors = []
        if not self.max_rotation_deg >= 0:
            errors.append(("max_rotation_deg", "must be >= 0"))
        if len(self.scale) != 2 or not 0 < self.scale[0] <= self.scale[1]:
            errors.append(("scale", "must be [lo, hi] with 0 < lo <= hi"))
        if not self.max_shear >= 0:
            errors.append(("max_shear", "must be >= 0"))
        if not self.max_translation >= 0:
            errors.append(("max_translation", "must be >= 0"))
        if not self.max_alpha >= 0:
            errors.append(("max_alpha", "must be >= 0"))
        if not self.zetas or any(int(z) != z or z < 2 for z in self.zetas):
            errors.append(("zetas", "must be a non-empty list of integers >= 2"))
        return errors


def sample_params(ranges, seed):
    """Draw one ``(AffineParams, NonRigidParams)`` from ``ranges``."""
    g = rng.generator(seed, rng.PARAMS)
    rot = np.deg2rad(g.uniform(-ranges.max_rotation_deg, ranges.max_rotation_deg, 3))
    ap = AffineParams(
        rotation=rot,
        scale=g.uniform(ranges.scale[0], ranges.scale[1], 3),
        shear=g.uniform(-ranges.max_shear, ranges.max_shear, 3),
        translation=g.uniform(-ranges.max_translation, ranges.max_translation, 3),
    )
    nrp = NonRigidParams(
        alpha=float(g.uniform(0.0, ranges.max_alpha)),
        zeta=int(ranges.zetas[int(g.integers(len(ranges.zetas)))]),
    )
    return ap, nrp


def _rotation(axis, angle):
    c, s = np.cos(angle), np.sin(angle)
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def make_affine(p, dims=None):
    """Homogeneous matrix ``T(delta) R(phi) Sh(phi2) S(gamma)`` about the centre.

    The centre is ``(dims - 1) / 2`` when ``dims`` is given, the origin
    otherwise.
    """
    lin = (
        _rotation(2, p.rotation[2])
        @ _rotation(1, p.rotation[1])
        @ _rotation(0, p.rotation[0])
    )
    sh = np.eye(3)
    sh[0, 1], sh[0, 2], sh[1, 2] = p.shear
    lin = lin @ sh @ np.diag(p.scale)
    if abs(np.linalg.det(lin)) <= 1e-8:
        raise ValueError("affine parameters give a non-invertible matrix")
    center = np.zeros(3) if dims is None else (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    omega = np.eye(4)
    omega[:3, :3] = lin
    omega[:3, 3] = center + np.asarray(p.translation) - lin @ center
    return omega


def make_nonrigid(p, dims, seed):
    """Smooth displacement field from a seeded random control grid.

    Control points sit every ``zeta`` voxels; each carries a displacement drawn
    uniformly from ``[-alpha, alpha]^3`` and the field is their trilinear
    interpolation, so every component is bounded by ``alpha`` and changes by at
    most ``2 * alpha / zeta`` between neighbouring voxels.
    """
    dims = tuple(int(d) for d in dims)
    if p.alpha == 0.0:
        return np.zeros((3,) + dims)
    n_ctrl = tuple(-(-(d - 1) // p.zeta) + 1 for d in dims)
    g = rng.generator(seed, rng.NONRIGID)
    ctrl = g.uniform(-p.alpha, p.alpha, size=(3,) + n_ctrl)
    out = ctrl
    for k, d in enumerate(dims):
        pos = np.arange(d) / p.zeta
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_ctrl[k] - 1)
        w = (pos - lo).reshape([-1 if i == k + 1 else 1 for i in range(4)])
        a_lo = np.take(out, lo, axis=k + 1)
        out = a_lo + (np.take(out, hi, axis=k + 1) - a_lo) * w
    return np.clip(out, -p.alpha, p.alpha)


def warp_class(class_mask, omega, psi=None):
    """Pull back a binary mask: ``out(v) = in(round(inv(omega) @ (v - psi(v))))``.

    Reads outside the grid return 0.
    """
    b = np.asarray(class_mask)
    if b.ndim != 3:
        raise ValueError(f"class mask must be 3-D, got shape {b.shape}")
    if psi is not None and psi.shape != (3,) + b.shape:
        raise ValueError(f"displacement shape {psi.shape} does not match mask {b.shape}")
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (4, 4) or abs(np.linalg.det(omega[:3, :3])) <= 1e-8:
        raise ValueError("omega must be an invertible 4x4 matrix")
    inv = np.linalg.inv(omega)
    grid = np.indices(b.shape, dtype=np.float64)
    if psi is not None:
        grid = grid - psi
    src = np.tensordot(inv[:3, :3], grid, axes=1) + inv[:3, 3][:, None, None, None]
    idx = np.floor(src + 0.5).astype(np.int64)
    inside = np.ones(b.shape, dtype=bool)
    for k, n in enumerate(b.shape):
        inside &= (idx[k] >= 0) & (idx[k] < n)
        np.clip(idx[k], 0, n - 1, out=idx[k])
    out = b[idx[0], idx[1], idx[2]] != 0
    return (out & inside).astype(np.uint8)


def close_class(b):
    """2x2x2 max-pool, stride 1, zero padding: ``out(v) = max_{o in {0,1}^3} in(v + o)``."""
    b = np.asarray(b) != 0
    p = np.pad(b, ((0, 1), (0, 1), (0, 1)))
    d, h, w = b.shape
    out = np.zeros_like(b)
    for o0 in (0, 1):
        for o1 in (0, 1):
            for o2 in (0, 1):
                out |= p[o0:o0 + d, o1:o1 + h, o2:o2 + w]
    return out.astype(np.uint8)


_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


def component_count(b, connectivity=6):
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    _, n = ndimage.label(np.asarray(b) != 0, structure=_STRUCTURES[connectivity])
    return int(n)


def generate_mask(m, ap, nrp, seed, closing=True):
    """Deform every foreground class of ``m`` and merge the results.

    Classes are warped independently, max-pooled, and painted in increasing
    class order, so where two classes overlap the higher class id wins.
    ``closing=False`` skips the max-pool (used to measure what it repairs).
    """
    omega = make_affine(ap, m.dims)
    psi = make_nonrigid(nrp, m.dims, seed)
    field = DeformationField(omega, psi)
    out = np.zeros(m.dims, dtype=np.uint8)
    for c in range(1, m.num_classes):
        cls = m.labels == c
        if not cls.any():
            continue
        warped = warp_class(cls, field.omega, field.psi)
        if closing:
            warped = close_class(warped)
        out[warped != 0] = c
    return LabelVolume(out, m.spacing, m.num_classes)


def topology_report(before, after, connectivity=6):
    """Per-class component counts before and after deformation."""
    report = {}
    for c in range(1, before.num_classes):
        nb = component_count(before.labels == c, connectivity)
        na = component_count(after.labels == c, connectivity)
        if nb or na:
            report[str(c)] = {"before": nb, "after": na}
    return {"connectivity": connectivity, "classes": report}


def tube_phantom(dims=(32, 32, 32), label=8, radius=0.0, num_classes=9):
    """A single curved tube running along axis 2, 6-connected by construction.

    ``radius=0`` gives a one-voxel-thick centreline.
    """
    d, h, w = dims
    lab = np.zeros(dims, dtype=np.uint8)
    xs = np.arange(2, w - 2)
    t = (xs - xs[0]) / max(len(xs) - 1, 1)
    c0 = np.rint(d / 2 + 0.2 * d * np.sin(2 * np.pi * t)).astype(int)
    c1 = np.rint(h / 2 + 0.15 * h * np.cos(np.pi * t)).astype(int)
    prev = None
    for x, a, b in zip(xs, c0, c1):
        pts = [(a, b, x)]
        if prev is not None:
            pa, pb, _ = prev
            # 6-connected bridge: walk a0, then a1, in the previous column
            step = 1 if a >= pa else -1
            pts += [(z, pb, x - 1) for z in range(pa, a + step, step)]
            step = 1 if b >= pb else -1
            pts += [(a, y, x - 1) for y in range(pb, b + step, step)]
        for p in pts:
            lab[p] = label
        prev = (a, b, x)
    if radius > 0:
        r = int(np.ceil(radius))
        ball = np.indices((2 * r + 1,) * 3) - r
        ball = (ball ** 2).sum(0) <= radius ** 2
        lab = np.where(ndimage.binary_dilation(lab == label, structure=ball), label, 0).astype(np.uint8)
    return LabelVolume(lab, num_classes=num_classes)
