"""Skip-sampling variance and confidence maps.

Decoded intermediates are collected every ``k`` reverse steps. The per-voxel
spread of those snapshots, min-max normalised over the volume and flipped,
is the confidence map: 1 where generation was stable, 0 where it moved most.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from structvol.diffusion import SkipTrace
from structvol.svol import read_svol, write_svol
from structvol.volume import LabelVolume, Volume


@dataclass(frozen=True)
class SkipSchedule:
    T: int
    k: int
    steps: tuple

    @property
    def r(self):
        return len(self.steps) - 1


def skip_schedule(T, k):
    """Steps ``0, k, ..., r*k`` with ``r = floor((T - 1) / k)``."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if k < 1:
        raise ValueError(f"skip interval k must be >= 1, got {k}")
    r = (T - 1) // k
    return SkipSchedule(int(T), int(k), tuple(i * k for i in range(r + 1)))


class ConfidenceMap(Volume):
    """Single-channel volume with every value in ``[0, 1]``."""

    def __post_init__(self):
        super().__post_init__()
        if self.channels != 1:
            raise ValueError("confidence maps have one channel")
        if self.values.min() < 0 or self.values.max() > 1:
            raise ValueError("confidence values must lie in [0, 1]")

    @classmethod
    def from_volume(cls, vol):
        return cls(vol.values, vol.spacing, (0.0, 1.0))


def skip_variance(volumes):
    """Per-voxel ``sum_i (I_i - mean)^2 / r`` over ``r + 1`` snapshots.

    Multi-channel snapshots are averaged over channels afterwards.
    """
    stack = np.stack([np.asarray(v.values if isinstance(v, Volume) else v, dtype=np.float64) for v in volumes])
    if stack.shape[0] < 2:
        raise ValueError(f"need at least 2 snapshots, got {stack.shape[0]}")
    if stack.ndim == 4:
        stack = stack[:, None]
    r = stack.shape[0] - 1
    dev = stack - stack.mean(axis=0)
    return (dev * dev).sum(axis=0).mean(axis=0) / r


def confidence_map(trace):
    """``1 - minmax(skip_variance)``; a spatially constant variance gives all ones.

    Snapshots may be volumes or raw ``(C, D, H, W)`` arrays; arrays skip the
    float32 rounding a :class:`Volume` applies to its values.
    """
    volumes = trace.volumes if isinstance(trace, SkipTrace) else list(trace)
    if len(volumes) < 2:
        raise ValueError(f"confidence map needs a trace of length >= 2, got {len(volumes)}")
    dims = {v.dims if isinstance(v, Volume) else np.shape(v)[-3:] for v in volumes}
    if len(dims) != 1:
        raise ValueError(f"trace volumes disagree on dims: {sorted(dims)}")
    var = skip_variance(volumes)
    lo, hi = var.min(), var.max()
    if hi > lo:
        norm = (var - lo) / (hi - lo)
    else:
        norm = np.zeros_like(var)
    spacing = volumes[0].spacing if isinstance(volumes[0], Volume) else (1.0, 1.0, 1.0)
    return ConfidenceMap(1.0 - norm, spacing, (0.0, 1.0))


@dataclass(frozen=True)
class SyntheticEntry:
    mask: LabelVolume
    image: Volume
    cmap: ConfidenceMap

    def __post_init__(self):
        for name in ("image", "cmap"):
            dims = getattr(self, name).dims
            if dims != self.mask.dims:
                raise ValueError(f"{name} dims {dims} do not match mask dims {self.mask.dims}")

    @property
    def dims(self):
        return self.mask.dims


def attach_confidence(mask, image, cmap):
    if not isinstance(cmap, ConfidenceMap):
        cmap = ConfidenceMap.from_volume(cmap)
    return SyntheticEntry(mask, image, cmap)


def save_entry(entry, directory, stem, seed=None, schedule=None, k=None):
    """Write the three members as SVOL files; return the manifest record.

    Paths in the record are relative to ``directory``.
    """
    os.makedirs(directory, exist_ok=True)
    record = {}
    for member in ("mask", "image", "cmap"):
        name = f"{stem}_{member}.svol"
        write_svol(os.path.join(directory, name), getattr(entry, member))
        record[member] = name
    record.update(seed=seed, schedule=schedule, k=k, dims=list(entry.dims))
    return record


def load_entry(record, base="."):
    mask = read_svol(os.path.join(base, record["mask"]))
    image = read_svol(os.path.join(base, record["image"]))
    cmap = read_svol(os.path.join(base, record["cmap"]))
    return attach_confidence(mask, image, cmap)


def write_manifest(path, records):
    with open(path, "w") as fh:
        json.dump(records, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_corpus(manifest_path):
    """Load every entry listed in a synthetic-corpus manifest."""
    with open(manifest_path) as fh:
        records = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    return [load_entry(r, base) for r in records]


def load_trace_dir(path):
    """Snapshots written by ``structvol synth --trace-out``, in step order."""
    names = sorted(n for n in os.listdir(path) if n.startswith("step_") and n.endswith(".svol"))
    if not names:
        raise ValueError(f"no step_*.svol files in {path}")
    steps = [int(n[5:-5]) for n in names]
    order = np.argsort(steps)
    return SkipTrace([steps[i] for i in order], [read_svol(os.path.join(path, names[i])) for i in order])
