"""Noise schedules, the masked forward process and conditional DDPM sampling.

A denoiser is any callable ``denoiser(x, t) -> eps`` taking a batch
``(B, C, rows, cols)`` and an integer timestep (or a length-B integer
array) and returning a noise prediction of the same shape.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .volume import (
    Axis,
    RowMask,
    Volume,
    VolumeError,
    assemble,
    average_volumes,
    interlace,
    make_uniform_mask,
    slice_stack,
)

Denoiser = Callable[[np.ndarray, "int | np.ndarray"], np.ndarray]
# restorer(observations (B, C, l, N), mask, rngs) -> (B, C, n, N)
SliceRestorer = Callable[[np.ndarray, RowMask, Sequence[np.random.Generator]], np.ndarray]

SCHEDULES = ("cosine", "linear")
INTERLACE_MODES = ("every-step", "init-only")
LOSS_MASKS = ("free", "literal")
LOSS_KINDS = ("l1", "l2")

# slices per restoration batch; fixed so results never depend on thread count
SLICE_CHUNK = 16
_AXIS_CODE = {Axis.XY: 0, Axis.XZ: 1, Axis.YZ: 2}


@dataclass(frozen=True)
class NoiseSchedule:
    """``betas[t-1]`` is beta_t; ``alpha_bars[t]`` is the cumulative product, ``alpha_bars[0] = 1``."""

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty vector")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        betas.flags.writeable = False
        object.__setattr__(self, "betas", betas)

    @property
    def T(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.concatenate([[1.0], np.cumprod(self.alphas)])

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t


def build_cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Squared-cosine schedule: alpha_bar(t) = f(t) / f(0), f(t) = cos^2(((t/T + s)/(1 + s)) pi/2)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    betas = np.minimum(1.0 - f[1:] / f[:-1], max_beta)
    return NoiseSchedule(betas)


def build_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    scale = 1000.0 / T
    return NoiseSchedule(np.linspace(beta_start * scale, min(beta_end * scale, 0.999), T))


@dataclass(frozen=True)
class DiffusionConfig:
    timesteps: int = 200
    schedule: str = "cosine"
    interlace: str = "every-step"
    # add noise on the final (t = 1) step; off means x_0 = mean
    final_step_noise: bool = False
    loss: str = "l1"
    loss_mask: str = "free"

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        for name, value, allowed in (
            ("schedule", self.schedule, SCHEDULES),
            ("interlace", self.interlace, INTERLACE_MODES),
            ("loss", self.loss, LOSS_KINDS),
            ("loss_mask", self.loss_mask, LOSS_MASKS),
        ):
            if value not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {value!r}")

    def build_schedule(self) -> NoiseSchedule:
        if self.schedule == "cosine":
            return build_cosine_schedule(self.timesteps)
        return build_linear_schedule(self.timesteps)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward process sample sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` may be a scalar or one timestep per batch item.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"timestep outside [1, {sched.T}]")
    abar = sched.alpha_bars[t]
    if abar.ndim:
        abar = abar.reshape(-1, *([1] * (x0.ndim - 1)))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def loss_weights(mask: RowMask, shape: tuple[int, ...], loss_mask: str = "free") -> tuple[np.ndarray, np.ndarray]:
    """Per-row target and prediction weights for the masked objective.

    ``free``: both the target and the prediction are restricted to rows not
    in the mask. ``literal``: the target is ``b * eps`` and the prediction is
    compared on every row.
    """
    rows = np.broadcast_to(mask.b.reshape(-1, 1), shape[-2:])
    if loss_mask == "free":
        w = 1.0 - rows
        return w, w
    if loss_mask == "literal":
        return rows, np.ones_like(rows)
    raise ValueError(f"unknown loss mask {loss_mask!r}")


def masked_error(pred: np.ndarray, eps: np.ndarray, mask: RowMask,
                 loss: str = "l1", loss_mask: str = "free") -> tuple[float, np.ndarray]:
    """Loss value and its gradient with respect to ``pred`` for one image."""
    target_w, pred_w = loss_weights(mask, pred.shape, loss_mask)
    diff = (pred - target_w * eps) * pred_w
    count = float(pred.shape[0] * pred_w.sum())
    if loss == "l1":
        return float(np.abs(diff).sum() / count), np.sign(diff) * pred_w / count
    if loss == "l2":
        return float((diff ** 2).sum() / count), 2.0 * diff * pred_w / count
    raise ValueError(f"unknown loss {loss!r}")


def training_loss(denoiser: Denoiser, x_high: np.ndarray, mask: RowMask, t: int, eps: np.ndarray,
                  sched: NoiseSchedule, loss: str = "l1", loss_mask: str = "free") -> float:
    """Masked-slice objective for a single ``(C, n, n)`` image."""
    x_high = np.asarray(x_high, dtype=np.float64)
    if x_high.ndim != 3 or x_high.shape[1] != mask.n:
        raise ValueError(f"x_high must be (C, {mask.n}, N), got {x_high.shape}")
    t = sched.check_t(t)
    x_t = q_sample(x_high, t, eps, sched)
    pred = predict_noise(denoiser, interlace(x_t, x_high, mask)[None], t, mask)[0]
    if pred.shape != x_high.shape:
        raise ValueError(f"denoiser returned {pred.shape}, expected {x_high.shape}")
    value, _ = masked_error(pred.astype(np.float64), eps, mask, loss, loss_mask)
    return value


def predict_noise(denoiser: Denoiser, x: np.ndarray, t, mask: RowMask | None = None) -> np.ndarray:
    """Call ``denoiser``, passing the mask only to models that take it as input."""
    if getattr(denoiser, "wants_mask", False):
        return np.asarray(denoiser(x, t, mask=mask), dtype=np.float64)
    return np.asarray(denoiser(x, t), dtype=np.float64)


def _draw(rngs: Sequence[np.random.Generator], shape: tuple[int, ...]) -> np.ndarray:
    return np.stack([rng.standard_normal(shape) for rng in rngs])


def _as_rngs(rng, batch: int) -> list[np.random.Generator]:
    if isinstance(rng, np.random.Generator):
        if batch != 1:
            raise ValueError("a batched step needs one generator per item")
        return [rng]
    rngs = list(rng)
    if len(rngs) != batch:
        raise ValueError(f"expected {batch} generators, got {len(rngs)}")
    return rngs


def posterior_mean(eps_pred: np.ndarray, x_t: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    beta = sched.betas[t - 1]
    abar = sched.alpha_bars[t]
    return (x_t - beta / math.sqrt(1.0 - abar) * eps_pred) / math.sqrt(1.0 - beta)


def ddpm_reverse_step(denoiser: Denoiser, x_t: np.ndarray, t: int, sched: NoiseSchedule, rng,
                      final_step_noise: bool = False, mask: RowMask | None = None) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1} with variance beta_t.

    ``x_t`` is a single ``(C, R, N)`` image with ``rng`` a Generator, or a
    batch ``(B, C, R, N)`` with one Generator per item. No noise is added at
    ``t = 1`` unless ``final_step_noise`` is set.
    """
    t = sched.check_t(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 3
    batch = x_t[None] if single else x_t
    rngs = _as_rngs(rng, batch.shape[0])
    eps = predict_noise(denoiser, batch, t, mask)
    out = posterior_mean(eps, batch, t, sched)
    if t > 1 or final_step_noise:
        out = out + math.sqrt(sched.betas[t - 1]) * _draw(rngs, batch.shape[1:])
    return out[0] if single else out


def restore_batch(denoiser: Denoiser, observations: np.ndarray, mask: RowMask, sched: NoiseSchedule,
                  rngs: Sequence[np.random.Generator], interlace_mode: str = "every-step",
                  final_step_noise: bool = False) -> np.ndarray:
    """Conditional reverse diffusion for a batch of row observations.

    ``observations`` has shape ``(B, C, l, N)`` with ``l = mask.length``;
    the result has ``mask.n`` rows, is clamped to [0, 1], and carries the
    observation bit-exactly on the mask rows.
    """
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 4 or obs.shape[2] != mask.length:
        raise VolumeError(f"observations must be (B, C, {mask.length}, N), got {obs.shape}")
    if interlace_mode not in INTERLACE_MODES:
        raise ValueError(f"unknown interlace mode {interlace_mode!r}")
    rngs = _as_rngs(rngs, obs.shape[0])
    b, c, _, width = obs.shape
    x = interlace(_draw(rngs, (c, mask.n, width)), obs, mask)
    if mask.length < mask.n:
        for t in range(sched.T, 0, -1):
            x = ddpm_reverse_step(denoiser, x, t, sched, rngs, final_step_noise, mask)
            if interlace_mode == "every-step":
                x = interlace(x, obs, mask)
    return interlace(np.clip(x, 0.0, 1.0), obs, mask)


def restore(denoiser: Denoiser, observation: np.ndarray, mask: RowMask, sched: NoiseSchedule,
            rng: np.random.Generator, interlace_mode: str = "every-step",
            final_step_noise: bool = False) -> np.ndarray:
    """Restore one ``(C, l, N)`` observation to ``(C, n, N)``."""
    observation = np.asarray(observation)
    if observation.ndim != 3:
        raise VolumeError(f"observation must be (C, l, N), got {observation.shape}")
    return restore_batch(denoiser, observation[None], mask, sched, [rng],
                         interlace_mode, final_step_noise)[0]


def diffusion_restorer(denoiser: Denoiser, cfg: DiffusionConfig,
                       sched: NoiseSchedule | None = None) -> SliceRestorer:
    """Bind a denoiser and config into a :data:`SliceRestorer`."""
    sched = sched if sched is not None else cfg.build_schedule()

    def run(observations, mask, rngs):
        return restore_batch(denoiser, observations, mask, sched, rngs,
                             cfg.interlace, cfg.final_step_noise)

    return run


def slice_rng(seed, axis: Axis | str, index: int) -> np.random.Generator:
    """Generator for one slice, derived from (seed, axis, index) only."""
    seed = [int(s) for s in np.atleast_1d(seed)]
    return np.random.default_rng(np.random.SeedSequence(seed + [_AXIS_CODE[Axis(axis)], int(index)]))


def superresolve_along_axis(v: Volume, axis: Axis | str, restorer: SliceRestorer,
                            seed=0, threads: int = 1) -> Volume:
    """Restore every XZ or YZ slice of an anisotropic volume independently.

    ``v`` has depth l dividing n = H = W; the observed planes land on the
    uniform mask rows ``0, n/l, 2n/l, ...`` of each slice.
    """
    axis = Axis(axis)
    if axis is Axis.XY:
        raise VolumeError("super-resolution runs along XZ or YZ slices")
    _, h, w, depth = v.shape
    if h != w:
        raise VolumeError(f"lateral dimensions must match, got H={h} W={w}")
    mask = make_uniform_mask(h, depth)
    lows = slice_stack(v, axis)
    m = lows.shape[0]
    chunks = [range(i, min(i + SLICE_CHUNK, m)) for i in range(0, m, SLICE_CHUNK)]

    def work(idx):
        rngs = [slice_rng(seed, axis, i) for i in idx]
        return restorer(lows[idx.start:idx.stop], mask, rngs)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    high = np.concatenate(parts).astype(np.float32)
    return assemble(high, axis)


@dataclass(frozen=True)
class SuperResolved:
    volume: Volume
    xz: Volume
    yz: Volume


def superresolve_volume(v: Volume, restorer: SliceRestorer, seed=0, threads: int = 1) -> SuperResolved:
    """Super-resolve along XZ and YZ and average the two directional volumes."""
    xz = superresolve_along_axis(v, Axis.XZ, restorer, seed, threads)
    yz = superresolve_along_axis(v, Axis.YZ, restorer, seed, threads)
    return SuperResolved(average_volumes(xz, yz), xz, yz)
