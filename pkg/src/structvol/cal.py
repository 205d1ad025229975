"""Confidence-aware segmentation training.

Per-voxel cross-entropy is averaged either plainly or weighted by the
synthetic entry's confidence map. The weighted mean is *not* divided by the
confidence mass unless ``renormalize`` is asked for, so a low-confidence
entry also contributes a smaller gradient overall.

The reference segmenter is a per-voxel multinomial logistic model over three
features: the voxel intensity, the mean intensity of its ``(2r+1)^3``
neighbourhood and a constant.
"""

import json
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import ndimage

from structvol import rng
from structvol.errors import TrainingDiverged
from structvol.ssv import ConfidenceMap, SyntheticEntry

PROB_FLOOR = 1e-12
SCHEMA_VERSION = 1


class Segmenter(Protocol):
    num_classes: int

    def predict(self, image): ...


@dataclass
class TrainConfig:
    epochs_pretrain: int = 20
    epochs_finetune: int = 10
    lr: float = 0.5
    batch_size: int = 4
    seed: int = 0
    use_cal: bool = True
    renormalize: bool = False

    def validate(self):
        errors = []
        for name in ("epochs_pretrain", "epochs_finetune"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 0:
                errors.append((name, "must be a non-negative integer"))
        if self.batch_size < 1:
            errors.append(("batch_size", "must be >= 1"))
        if not np.isfinite(self.lr) or self.lr < 0:
            errors.append(("lr", "must be finite and >= 0"))
        if self.seed < 0:
            errors.append(("seed", "must be >= 0"))
        return errors


def voxel_ce(probs, labels):
    """Cross-entropy per voxel; ``probs`` is ``(K, D, H, W)``, ``labels`` ``(D, H, W)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[1:] != labels.shape:
        raise ValueError(f"prediction dims {probs.shape[1:]} do not match label dims {labels.shape}")
    p = np.take_along_axis(probs, labels[None], axis=0)[0]
    return -np.log(np.maximum(p, PROB_FLOOR))


def weighted_mean(losses, weights=None, renormalize=False):
    if weights is None:
        return float(losses.mean())
    w = np.asarray(weights, dtype=np.float64)
    total = float((w * losses).sum())
    if renormalize:
        mass = float(w.sum())
        return total / mass if mass > 0 else 0.0
    return total / losses.size


def _labels(entry):
    return entry.mask.labels


def _cmap(entry):
    cmap = getattr(entry, "cmap", None)
    return None if cmap is None else cmap.values[0]


def loss_ori(seg, entry):
    """Unweighted mean per-voxel cross-entropy of ``seg`` on ``entry``."""
    return weighted_mean(voxel_ce(seg.predict(entry.image), _labels(entry)))


def loss_cal(seg, entry, renormalize=False):
    """Confidence-weighted mean per-voxel cross-entropy."""
    w = _cmap(entry)
    if w is None:
        raise ValueError("entry has no confidence map")
    return weighted_mean(voxel_ce(seg.predict(entry.image), _labels(entry)), w, renormalize)


def _softmax(logits):
    m = logits.max(axis=0, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=0, keepdims=True)


class LogisticSegmenter:
    """Per-voxel softmax over ``W @ [intensity, neighbourhood mean, 1]``."""

    n_features = 3

    def __init__(self, num_classes, radius=1, weights=None):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        if radius < 0:
            raise ValueError("radius must be >= 0")
        self.num_classes = int(num_classes)
        self.radius = int(radius)
        self.W = np.zeros((num_classes, self.n_features)) if weights is None else np.array(weights, dtype=np.float64)

    def copy(self):
        return LogisticSegmenter(self.num_classes, self.radius, self.W.copy())

    def features(self, image):
        x = np.asarray(image.values[0], dtype=np.float64)
        if self.radius:
            nb = ndimage.uniform_filter(x, size=2 * self.radius + 1, mode="nearest")
        else:
            nb = x
        return np.stack([x, nb, np.ones_like(x)])

    def predict_features(self, f):
        return _softmax(np.tensordot(self.W, f, axes=1))

    def predict(self, image):
        return self.predict_features(self.features(image))

    def segment(self, image):
        return np.argmax(self.predict(image), axis=0).astype(np.uint8)

    def loss_and_grad(self, f, labels, weights=None, renormalize=False):
        """Mean (optionally weighted) cross-entropy and its gradient in ``W``."""
        probs = self.predict_features(f)
        ce = voxel_ce(probs, labels)
        n = ce.size
        if weights is None:
            w = np.ones_like(ce)
            denom = n
        else:
            w = np.asarray(weights, dtype=np.float64)
            denom = float(w.sum()) if renormalize else n
        if denom <= 0:
            return 0.0, np.zeros_like(self.W)
        loss = float((w * ce).sum()) / denom
        lab = np.asarray(labels, dtype=np.int64)[None]
        dlogits = probs.copy()
        np.put_along_axis(dlogits, lab, np.take_along_axis(dlogits, lab, 0) - 1.0, 0)
        dlogits *= w / denom
        grad = dlogits.reshape(self.num_classes, -1) @ f.reshape(self.n_features, -1).T
        return loss, grad

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "logistic",
            "num_classes": self.num_classes,
            "radius": self.radius,
            "weights": self.W.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported model schema version {d.get('schema_version')}")
        return cls(d["num_classes"], d["radius"], d["weights"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def make_reference_segmenter(num_classes=2, feature_radius=1, seed=None, init_scale=1e-3):
    """Logistic segmenter; with a seed the weights start at small Gaussian values."""
    seg = LogisticSegmenter(num_classes, feature_radius)
    if seed is not None:
        seg.W = rng.generator(seed, rng.PARAMS).normal(0.0, init_scale, seg.W.shape)
    return seg


def train(seg, corpus, cfg, use_cal, epochs=None):
    """Seeded mini-batch gradient descent over ``corpus``.

    Each epoch visits the entries in a seeded random order, ``cfg.batch_size``
    at a time; a step's loss is the mean of its entries' losses. Entries
    without a confidence map count as fully confident. Returns a new
    segmenter and the per-step loss history.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    epochs = cfg.epochs_pretrain if epochs is None else epochs
    seg = seg.copy()
    feats = [seg.features(e.image) for e in corpus]
    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.generator(cfg.seed, rng.TRAIN, epoch).permutation(len(corpus))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, grad = 0.0, np.zeros_like(seg.W)
            for i in batch:
                w = _cmap(corpus[i]) if use_cal else None
                li, gi = seg.loss_and_grad(feats[i], _labels(corpus[i]), w, cfg.renormalize)
                loss += li / len(batch)
                grad += gi / len(batch)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(step, loss)
            history.append(loss)
            if cfg.lr:
                seg.W = seg.W - cfg.lr * grad
            step += 1
    return seg, history


def as_real_entry(pair):
    """Wrap a real ``DataPair`` as an entry with confidence 1 everywhere."""
    ones = np.ones(pair.mask.dims, dtype=np.float32)
    return SyntheticEntry(pair.mask, pair.image, ConfidenceMap(ones, pair.mask.spacing, (0.0, 1.0)))


def pretrain_finetune(seg, synthetic, real, cfg):
    """Pretrain on synthetic entries (confidence-weighted if ``cfg.use_cal``),
    then fine-tune on real pairs with the plain loss."""
    if not synthetic or not real:
        raise ValueError("both corpora must be non-empty")
    real = [as_real_entry(p) if not isinstance(p, SyntheticEntry) else p for p in real]
    history = []
    if cfg.epochs_pretrain:
        seg, h = train(seg, synthetic, cfg, cfg.use_cal, epochs=cfg.epochs_pretrain)
        history += h
    if cfg.epochs_finetune:
        fine_cfg = TrainConfig(**{**cfg.__dict__, "seed": rng.child_seed(cfg.seed, 1)})
        seg, h = train(seg, real, fine_cfg, False, epochs=cfg.epochs_finetune)
        history += h
    return seg, history
