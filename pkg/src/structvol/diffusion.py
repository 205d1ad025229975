"""Gaussian diffusion over latent grids: schedules, forward noising, ancestral
sampling with the epsilon parametrisation, the noise-matching objective, and
small reference denoisers and codecs that make the sampler checkable.

Step indices follow the usual convention: ``betas[t - 1]`` is beta_t for
``t = 1..T``, ``z_0`` is clean data and ``z_T`` is (close to) pure noise.
"""

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from structvol import rng
from structvol.errors import TrainingDiverged
from structvol.volume import Volume, resample_array


class NoiseSchedule:
    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValueError("every beta must lie strictly between 0 and 1")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ValueError("cumulative alpha product must be strictly decreasing")
        self.name = None

    @property
    def T(self):
        return self.betas.size

    def beta(self, t):
        return self.betas[t - 1]

    def alpha(self, t):
        return self.alphas[t - 1]

    def alpha_bar(self, t):
        return self.alpha_bars[t - 1]

    def check_step(self, t):
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside 1..{self.T}")

    def __repr__(self):
        return f"NoiseSchedule({self.name or f'T={self.T}'})"


def linear_schedule(T, beta_start=1e-4, beta_end=0.02):
    sched = NoiseSchedule(np.linspace(beta_start, beta_end, T))
    sched.name = f"linear:{beta_start:g}:{beta_end:g}:{T}"
    return sched


def constant_schedule(T, beta):
    sched = NoiseSchedule(np.full(T, float(beta)))
    sched.name = f"constant:{beta:g}:{T}"
    return sched


def parse_schedule(text):
    """Parse ``linear:START:END:T`` or ``constant:BETA:T``."""
    kind, *args = text.split(":")
    try:
        if kind == "linear" and len(args) == 3:
            return linear_schedule(int(args[2]), float(args[0]), float(args[1]))
        if kind == "constant" and len(args) == 2:
            return constant_schedule(int(args[1]), float(args[0]))
    except ValueError as exc:
        raise ValueError(f"bad schedule {text!r}: {exc}") from exc
    raise ValueError(f"bad schedule {text!r}; expected linear:START:END:T or constant:BETA:T")


@dataclass(frozen=True)
class LatentState:
    step: int
    z: np.ndarray


class Denoiser(Protocol):
    def predict_eps(self, z, t, c): ...


class LatentCodec(Protocol):
    latent_channels: int
    factor: int

    def encode(self, vol): ...

    def decode(self, state, like=None): ...


def forward_diffuse(z0, t, sched, seed, eps=None):
    """Closed-form marginal ``z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps``."""
    sched.check_step(t)
    x = z0.z if isinstance(z0, LatentState) else np.asarray(z0, dtype=np.float64)
    if eps is None:
        eps = rng.generator(seed, rng.STEP, t).standard_normal(x.shape)
    ab = sched.alpha_bar(t)
    return LatentState(t, np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps)


def reverse_step(zt, t, c, den, sched, seed, noise=None):
    """One ancestral step ``z_t -> z_{t-1}`` with fixed variance ``beta_t``.

    ``noise`` overrides the seeded draw; it is ignored at ``t = 1`` where the
    step returns the mean.
    """
    sched.check_step(t)
    z = zt.z if isinstance(zt, LatentState) else np.asarray(zt, dtype=np.float64)
    eps = den.predict_eps(z, t, c)
    beta, alpha, ab = sched.beta(t), sched.alpha(t), sched.alpha_bar(t)
    mean = (z - (beta / np.sqrt(1.0 - ab)) * eps) / np.sqrt(alpha)
    if t == 1:
        return LatentState(0, mean)
    if noise is None:
        noise = rng.generator(seed, rng.STEP, t).standard_normal(z.shape)
    return LatentState(t - 1, mean + np.sqrt(beta) * noise)


@dataclass
class SkipTrace:
    """Decoded snapshots taken during sampling, ordered by step index."""

    steps: list = field(default_factory=list)
    volumes: list = field(default_factory=list)

    def __len__(self):
        return len(self.volumes)


def sample(c, den, codec, sched, seed, trace_steps=(), shape=None):
    """Run the full reverse chain from seeded noise.

    The latent shape is ``shape`` if given, otherwise ``codec.latent_channels``
    channels on the spatial grid of ``c``. Every step index in ``trace_steps``
    (``0..T-1``, the index of the latent just produced) is decoded into the
    returned :class:`SkipTrace`.
    """
    trace_steps = set(int(s) for s in trace_steps)
    bad = [s for s in trace_steps if not 0 <= s < sched.T]
    if bad:
        raise ValueError(f"trace steps {sorted(bad)} outside 0..{sched.T - 1}")
    if shape is None:
        if c is None:
            raise ValueError("latent shape needed when no condition is given")
        shape = (codec.latent_channels,) + tuple(np.shape(c)[1:])
    z = rng.generator(seed, rng.INIT).standard_normal(shape)
    state = LatentState(sched.T, z)
    snaps = {}
    for t in range(sched.T, 0, -1):
        state = reverse_step(state, t, c, den, sched, seed)
        if state.step in trace_steps:
            snaps[state.step] = codec.decode(state)
    trace = SkipTrace(sorted(snaps), [snaps[s] for s in sorted(snaps)])
    return state, trace


def training_draw(shape, T, seed, item):
    """The ``(t, eps)`` pair used for batch item ``item`` by :func:`dm_loss`."""
    g = rng.generator(seed, rng.ITEM, item)
    t = int(g.integers(1, T + 1))
    return t, g.standard_normal(shape)


def dm_loss(z0_batch, den, sched, c_batch, seed):
    """Noise-matching objective: mean over items and elements of ``(eps - eps_hat)^2``."""
    if len(z0_batch) == 0:
        raise ValueError("batch must be non-empty")
    if c_batch is None:
        c_batch = [None] * len(z0_batch)
    if len(c_batch) != len(z0_batch):
        raise ValueError("one condition per batch item required")
    total, count = 0.0, 0
    for i, (z0, c) in enumerate(zip(z0_batch, c_batch)):
        z0 = np.asarray(z0, dtype=np.float64)
        t, eps = training_draw(z0.shape, sched.T, seed, i)
        zt = forward_diffuse(z0, t, sched, seed, eps=eps)
        diff = eps - den.predict_eps(zt.z, t, c)
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


class AnalyticGaussDenoiser:
    """Exact noise predictor for data that is elementwise ``N(mu, sigma^2)``.

    Uses the posterior mean of ``z_0`` given ``z_t``. The expression is
    simplified algebraically so it stays finite when ``abar_t -> 1``.
    """

    def __init__(self, mu, sigma, sched):
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        self.mu, self.sigma, self.sched = float(mu), float(sigma), sched

    def predict_eps(self, z, t, c=None):
        ab = self.sched.alpha_bar(t)
        s2 = self.sigma ** 2
        return np.sqrt(1.0 - ab) * (z - np.sqrt(ab) * self.mu) / (ab * s2 + 1.0 - ab)


def analytic_gauss_denoiser(mu, sigma, sched):
    return AnalyticGaussDenoiser(mu, sigma, sched)


class LinearDenoiser:
    """``eps_hat = A z + B c + b0 + b1 * t/T``, mixing over channels per voxel."""

    def __init__(self, latent_channels, cond_channels, T):
        self.T = int(T)
        self.A = np.zeros((latent_channels, latent_channels))
        self.B = np.zeros((latent_channels, cond_channels))
        self.b0 = np.zeros(latent_channels)
        self.b1 = np.zeros(latent_channels)

    def params(self):
        return {"A": self.A, "B": self.B, "b0": self.b0, "b1": self.b1}

    def copy(self):
        out = LinearDenoiser(self.A.shape[0], self.B.shape[1], self.T)
        for k, v in self.params().items():
            setattr(out, k, v.copy())
        return out

    def predict_eps(self, z, t, c=None):
        out = np.tensordot(self.A, z, axes=1)
        if c is not None and self.B.shape[1]:
            out = out + np.tensordot(self.B, np.asarray(c, dtype=np.float64), axes=1)
        bias = self.b0 + self.b1 * (t / self.T)
        return out + bias[(...,) + (None,) * (z.ndim - 1)]

    def gradients(self, z, t, c, resid, scale):
        """Gradients of ``scale * sum(resid^2)`` where ``resid = eps_hat - eps``."""
        g = 2.0 * scale * resid
        flat_g = g.reshape(g.shape[0], -1)
        grads = {
            "A": flat_g @ z.reshape(z.shape[0], -1).T,
            "b0": flat_g.sum(axis=1),
            "b1": flat_g.sum(axis=1) * (t / self.T),
        }
        if c is not None and self.B.shape[1]:
            c = np.asarray(c, dtype=np.float64)
            grads["B"] = flat_g @ c.reshape(c.shape[0], -1).T
        else:
            grads["B"] = np.zeros_like(self.B)
        return grads

    def to_dict(self):
        return {"T": self.T, **{k: v.tolist() for k, v in self.params().items()}}

    @classmethod
    def from_dict(cls, d):
        A = np.asarray(d["A"], dtype=np.float64)
        B = np.asarray(d["B"], dtype=np.float64).reshape(A.shape[0], -1)
        out = cls(A.shape[0], B.shape[1], d["T"])
        out.A, out.B = A, B
        out.b0 = np.asarray(d["b0"], dtype=np.float64)
        out.b1 = np.asarray(d["b1"], dtype=np.float64)
        return out


def train_linear_denoiser(dataset, sched, steps, lr, seed, batch_size=4, model=None):
    """Fit a :class:`LinearDenoiser` by seeded SGD on the noise-matching loss.

    ``dataset`` holds examples. An example is either one ``(z0, c)`` pair or a
    list of such pairs whose losses are summed (the two directions of a
    template pair, say). Returns ``(model, history)`` where ``history[i]`` is
    the minibatch loss at step ``i`` before its update.
    """
    examples = [ex if isinstance(ex, list) else [ex] for ex in dataset]
    if not examples:
        raise ValueError("dataset must be non-empty")
    z_ref, c_ref = examples[0][0]
    c_ch = 0 if c_ref is None else np.shape(c_ref)[0]
    model = LinearDenoiser(np.shape(z_ref)[0], c_ch, sched.T) if model is None else model.copy()
    history = []
    for step in range(steps):
        g = rng.generator(seed, rng.BATCH, step)
        picks = g.integers(0, len(examples), size=min(batch_size, len(examples)))
        grads = {k: np.zeros_like(v) for k, v in model.params().items()}
        loss = 0.0
        for bi, ex_idx in enumerate(picks):
            for term, (z0, c) in enumerate(examples[ex_idx]):
                z0 = np.asarray(z0, dtype=np.float64)
                t, eps = training_draw(z0.shape, sched.T, rng.child_seed(seed, step, term), bi)
                zt = forward_diffuse(z0, t, sched, seed, eps=eps).z
                resid = model.predict_eps(zt, t, c) - eps
                scale = 1.0 / (len(picks) * resid.size)
                loss += scale * float(np.sum(resid * resid))
                for k, v in model.gradients(zt, t, c, resid, scale).items():
                    grads[k] += v
        if not np.isfinite(loss):
            raise TrainingDiverged(step, loss)
        history.append(loss)
        if lr:
            for k, v in model.params().items():
                v -= lr * grads[k]
    return model, history


class IdentityCodec:
    factor = 1

    def __init__(self, channels=1):
        self.latent_channels = channels

    def encode(self, vol):
        return LatentState(0, vol.values.astype(np.float64))

    def decode(self, state, like=None):
        z = state.z if isinstance(state, LatentState) else state
        if like is None:
            return Volume(z)
        return Volume(z, like.spacing, like.intensity_range)


class PoolCodec:
    """Average-pool by ``factor`` into ``latent_channels`` replicated channels;
    decode averages the channels and upsamples trilinearly."""

    def __init__(self, factor=4, latent_channels=4):
        if factor < 1:
            raise ValueError("factor must be >= 1")
        self.factor = int(factor)
        self.latent_channels = int(latent_channels)

    def latent_dims(self, dims):
        if any(d % self.factor for d in dims):
            raise ValueError(f"dims {tuple(dims)} not divisible by codec factor {self.factor}")
        return tuple(d // self.factor for d in dims)

    def encode(self, vol):
        pooled = avg_pool(vol.values.astype(np.float64).mean(axis=0), self.factor)
        return LatentState(0, np.repeat(pooled[None], self.latent_channels, axis=0))

    def decode(self, state, like=None):
        z = state.z if isinstance(state, LatentState) else state
        mean = z.mean(axis=0)
        dims = tuple(d * self.factor for d in mean.shape)
        up = resample_array(mean, dims, "trilinear")[None]
        if like is None:
            return Volume(up)
        return Volume(up, like.spacing, like.intensity_range)


def identity_codec(channels=1):
    return IdentityCodec(channels)


def pool_codec(factor=4, latent_channels=4):
    return PoolCodec(factor, latent_channels)


def avg_pool(a, factor):
    """Non-overlapping average pool over the last three axes."""
    if factor == 1:
        return np.asarray(a, dtype=np.float64)
    *lead, d, h, w = a.shape
    if d % factor or h % factor or w % factor:
        raise ValueError(f"dims {(d, h, w)} not divisible by factor {factor}")
    r = a.reshape(*lead, d // factor, factor, h // factor, factor, w // factor, factor)
    n = a.ndim
    return r.mean(axis=(n - 2, n, n + 2))
