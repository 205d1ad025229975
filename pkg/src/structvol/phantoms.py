"""Synthetic vessel phantoms with known ground truth."""

import numpy as np

from structvol import rng
from structvol.conditioning import DataPair
from structvol.ssv import ConfidenceMap, SyntheticEntry
from structvol.volume import LabelVolume, Volume


def vessel_mask(dims=(16, 16, 16), seed=0, n_tubes=2, radius=1.5, label=1, num_classes=9):
    """A few smooth random tubes crossing the volume along axis 2."""
    g = rng.generator(seed, rng.ITEM)
    d, h, w = dims
    grid = np.indices(dims, dtype=np.float64)
    fg = np.zeros(dims, dtype=bool)
    x = np.arange(w, dtype=np.float64)
    for _ in range(n_tubes):
        a0, a1 = g.uniform(0.3, 0.7, 2) * (d - 1), g.uniform(0.3, 0.7, 2) * (h - 1)
        amp0, amp1 = g.uniform(0.1, 0.2, 2) * np.array([d, h])
        ph = g.uniform(0, 2 * np.pi, 2)
        c0 = a0[0] + (a0[1] - a0[0]) * x / max(w - 1, 1) + amp0 * np.sin(2 * np.pi * x / w + ph[0])
        c1 = a1[0] + (a1[1] - a1[0]) * x / max(w - 1, 1) + amp1 * np.sin(2 * np.pi * x / w + ph[1])
        dist2 = (grid[0] - c0[None, None, :]) ** 2 + (grid[1] - c1[None, None, :]) ** 2
        fg |= dist2 <= radius ** 2
    return LabelVolume(np.where(fg, label, 0).astype(np.uint8), num_classes=num_classes)


def render(mask, seed=0, fg=1.0, bg=0.0, noise=0.05):
    """Intensity ``fg`` on foreground, ``bg`` elsewhere, plus Gaussian noise."""
    g = rng.generator(seed, rng.STEP)
    img = np.where(mask.labels != 0, fg, bg) + g.normal(0.0, noise, mask.dims)
    return Volume(img[None], mask.spacing, (min(fg, bg), max(fg, bg)))


def phantom_pair(dims=(16, 16, 16), seed=0, fg=1.0, bg=0.0, noise=0.05, **mask_kw):
    mask = vessel_mask(dims, seed, **mask_kw)
    return DataPair(render(mask, seed, fg, bg, noise), mask)


def corrupt(pair, fraction=0.3, seed=0, fg=1.0, bg=0.0, noise=0.05):
    """Swap foreground/background intensity on a random ``fraction`` of voxels.

    The returned entry's confidence map is 0 on swapped voxels and 1 elsewhere.
    """
    g = rng.generator(seed, rng.BATCH)
    n = int(np.prod(pair.mask.dims))
    flip = np.zeros(n, dtype=bool)
    flip[g.choice(n, size=int(round(fraction * n)), replace=False)] = True
    flip = flip.reshape(pair.mask.dims)
    is_fg = pair.mask.labels != 0
    shown_fg = is_fg ^ flip
    img = np.where(shown_fg, fg, bg) + g.normal(0.0, noise, pair.mask.dims)
    image = Volume(img[None], pair.mask.spacing, (min(fg, bg), max(fg, bg)))
    cmap = ConfidenceMap((~flip).astype(np.float32), pair.mask.spacing, (0.0, 1.0))
    return SyntheticEntry(pair.mask, image, cmap)
