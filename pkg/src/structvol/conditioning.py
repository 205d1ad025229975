"""Template-pair conditioning.

A condition is built from a reference mask (the anatomy to realise) and a
template pair (an image with its mask). Both masks are reduced to their
fine-grained classes, binarised per class and stacked with the template
image along the channel axis. A pooled linear channel mixer stands in for the
trainable control encoder.
"""

import itertools
import json
import os
from dataclasses import dataclass

import numpy as np

from structvol import rng
from structvol.diffusion import avg_pool
from structvol.errors import TrainingDiverged
from structvol.svol import read_svol
from structvol.volume import FINE_CLASSES, LabelVolume, Volume, binarize, crop, filter_fine_grained


@dataclass(frozen=True)
class DataPair:
    image: Volume
    mask: LabelVolume

    def __post_init__(self):
        if self.image.dims != self.mask.dims:
            raise ValueError(f"image dims {self.image.dims} != mask dims {self.mask.dims}")


@dataclass(frozen=True)
class TemplateLibrary:
    entries: tuple

    def __post_init__(self):
        entries = tuple(self.entries)
        if entries and len({e.image.dims for e in entries}) != 1:
            raise ValueError("template library entries must share dims")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


def crop_pair(pair, size, policy="centered", seed=0):
    """Crop image and mask with the same offsets."""
    return DataPair(crop(pair.image, size, policy, seed), crop(pair.mask, size, policy, seed))


def load_library(manifest_path):
    """Read a JSON list of ``{"image": ..., "mask": ...}`` (paths relative to the manifest)."""
    with open(manifest_path) as fh:
        items = json.load(fh)
    if not isinstance(items, list):
        raise ValueError(f"{manifest_path}: manifest must be a JSON list")
    base = os.path.dirname(os.path.abspath(manifest_path))
    pairs = []
    for i, item in enumerate(items):
        try:
            image = read_svol(os.path.join(base, item["image"]))
            mask = read_svol(os.path.join(base, item["mask"]))
        except KeyError as exc:
            raise ValueError(f"{manifest_path}: entry {i} lacks {exc.args[0]!r}") from None
        if not isinstance(image, Volume) or not isinstance(mask, LabelVolume):
            raise ValueError(f"{manifest_path}: entry {i} must pair a real image with a label mask")
        pairs.append(DataPair(image, mask))
    return TemplateLibrary(pairs)


@dataclass(frozen=True)
class ConditionRaw:
    values: np.ndarray  # (2 * n_classes + image channels, D, H, W)
    n_mask_channels: int

    @property
    def channels(self):
        return self.values.shape[0]


def assemble_condition(ref_mask, tmpl, fine_classes=FINE_CLASSES):
    """Stack ``[ref mask channels | template mask channels | template image]``."""
    if ref_mask.dims != tmpl.mask.dims or ref_mask.dims != tmpl.image.dims:
        raise ValueError(
            f"dims differ: reference {ref_mask.dims}, template mask {tmpl.mask.dims}, "
            f"template image {tmpl.image.dims}"
        )
    fine_classes = list(fine_classes)
    ref = binarize(filter_fine_grained(ref_mask, fine_classes), fine_classes).values
    tm = binarize(filter_fine_grained(tmpl.mask, fine_classes), fine_classes).values
    raw = np.concatenate([ref.astype(np.float32), tm.astype(np.float32), tmpl.image.values], axis=0)
    return ConditionRaw(raw, 2 * len(fine_classes))


class ControlEncoder:
    """Average-pool by ``factor`` then mix channels: ``c = W @ pooled + bias``."""

    def __init__(self, weight, bias=None):
        self.weight = np.asarray(weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ValueError("encoder weight must be a matrix")
        self.bias = np.zeros(self.weight.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n))

    @classmethod
    def random(cls, n_in, n_out, seed, scale=None):
        g = rng.generator(seed, rng.PARAMS)
        scale = 1.0 / np.sqrt(n_in) if scale is None else scale
        return cls(g.normal(0.0, scale, (n_out, n_in)))

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def __call__(self, pooled):
        mixed = np.tensordot(self.weight, pooled, axes=1)
        return mixed + self.bias[:, None, None, None]

    def to_dict(self):
        return {"weight": self.weight.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["weight"], d["bias"])


def encode_condition(c_raw, codec_factor, encoder=None):
    """Bring a raw condition to latent resolution.

    Without an explicit ``encoder`` the channels pass through unmixed.
    """
    values = c_raw.values if isinstance(c_raw, ConditionRaw) else np.asarray(c_raw)
    if any(d % codec_factor for d in values.shape[1:]):
        raise ValueError(f"dims {values.shape[1:]} not divisible by codec factor {codec_factor}")
    pooled = avg_pool(values.astype(np.float64), codec_factor)
    if encoder is None:
        encoder = ControlEncoder.identity(values.shape[0])
    if encoder.weight.shape[1] != values.shape[0]:
        raise ValueError(f"encoder expects {encoder.weight.shape[1]} channels, got {values.shape[0]}")
    return encoder(pooled)


def enumerate_bidirectional_pairs(dataset):
    """Every ordered ``(template, reference)`` index pair, self-pairs included."""
    n = dataset if isinstance(dataset, int) else len(dataset)
    if n < 1:
        raise ValueError("dataset must be non-empty")
    return list(itertools.product(range(n), repeat=2))


def bidirectional_loss(loss_ab, loss_ba):
    total = float(loss_ab) + float(loss_ba)
    if not np.isfinite(total):
        raise TrainingDiverged(-1, total)
    return total


def sample_template(lib, seed):
    if len(lib) == 0:
        raise ValueError("template library is empty")
    return lib[int(rng.generator(seed, rng.TEMPLATE).integers(len(lib)))]


def direction_example(target, template, codec, encoder=None, fine_classes=FINE_CLASSES):
    """``(z0, c)`` for generating ``target`` with ``template`` as the template pair."""
    c_raw = assemble_condition(target.mask, template, fine_classes)
    c = encode_condition(c_raw, codec.factor, encoder)
    return codec.encode(target.image).z, c


def bidirectional_dataset(pairs, codec, encoder=None, fine_classes=FINE_CLASSES):
    """One training example per ordered pair ``(a, b)`` from
    :func:`enumerate_bidirectional_pairs`, holding the ``a@b`` and ``b@a``
    terms so the per-example loss is their sum.
    """
    return [
        [
            direction_example(pairs[b], pairs[a], codec, encoder, fine_classes),
            direction_example(pairs[a], pairs[b], codec, encoder, fine_classes),
        ]
        for a, b in enumerate_bidirectional_pairs(pairs)
    ]
