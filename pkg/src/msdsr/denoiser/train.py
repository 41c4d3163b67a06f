"""Training loops for the diffusion denoiser and the two regression baselines.

Every step draws its randomness from ``SeedSequence([seed, step])``, so a run
resumed from a checkpoint reproduces the uninterrupted loss sequence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..diffusion import DiffusionConfig, NoiseSchedule, loss_weights, q_sample
from ..volume import RowMask, interlace, sample_random_mask
from .net import NumericError, TinyDenoiserNet
from .optim import AdamW

log = logging.getLogger(__name__)

MODEL_KINDS = ("msdsr", "ms-regression", "e2e")


@dataclass(frozen=True)
class TrainConfig:
    model: str = "msdsr"
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup: float = 0.1
    l_min: int = 4
    l_max: int = 16
    # random flips / transposes of each crop
    augment: bool = True
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if not 0 < self.l_min <= self.l_max:
            raise ValueError(f"need 0 < l_min <= l_max, got {self.l_min}, {self.l_max}")


@dataclass
class Batch:
    inputs: np.ndarray
    t: np.ndarray
    target: np.ndarray
    weight: np.ndarray
    masks: list[RowMask] | None = None


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]


def _dihedral(img: np.ndarray, code: int) -> np.ndarray:
    if code & 1:
        img = img[:, ::-1, :]
    if code & 2:
        img = img[:, :, ::-1]
    if code & 4:
        img = img.transpose(0, 2, 1)
    return img


def _pick(data: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    idx = rng.integers(data.shape[0], size=cfg.batch_size)
    items = data[idx].astype(np.float64)
    if cfg.augment:
        codes = rng.integers(8, size=cfg.batch_size)
        items = np.stack([_dihedral(x, int(c)) for x, c in zip(items, codes)])
    return items


def msdsr_batch(data: np.ndarray, cfg: TrainConfig, diff: DiffusionConfig, sched: NoiseSchedule,
                rng: np.random.Generator) -> Batch:
    """Noised, interlaced slices with their noise targets and loss weights."""
    x0 = _pick(data, cfg, rng)
    b, c, n, _ = x0.shape
    masks = [sample_random_mask(n, cfg.l_min, cfg.l_max, rng) for _ in range(b)]
    t = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, sched)
    inputs = np.stack([interlace(x_t[i], x0[i], masks[i]) for i in range(b)])
    target = np.empty_like(eps)
    weight = np.empty((b, 1) + x0.shape[2:])
    for i, m in enumerate(masks):
        tw, pw = loss_weights(m, x0.shape[1:], diff.loss_mask)
        target[i] = tw * eps[i]
        weight[i, 0] = pw
    return Batch(inputs, t, target, weight, masks)


def regression_batch(data: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """Masked-slice regression: interlace rows into noise, predict the clean slice."""
    x0 = _pick(data, cfg, rng)
    b, c, n, _ = x0.shape
    masks = [sample_random_mask(n, cfg.l_min, cfg.l_max, rng) for _ in range(b)]
    noise = rng.standard_normal(x0.shape)
    inputs = np.stack([interlace(noise[i], x0[i], masks[i]) for i in range(b)])
    return Batch(inputs, np.zeros(b, dtype=np.int64), x0, np.ones((b, 1) + x0.shape[2:]), masks)


def e2e_batch(triplets: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """``triplets`` is ``(K, 3, C, H, W)``: planes z, z+1, z+2; predict the middle one."""
    idx = rng.integers(triplets.shape[0], size=cfg.batch_size)
    items = triplets[idx].astype(np.float64)
    if cfg.augment:
        codes = rng.integers(8, size=cfg.batch_size)
        items = np.stack([
            np.stack([_dihedral(p, int(code)) for p in trip]) for trip, code in zip(items, codes)
        ])
    b = items.shape[0]
    inputs = np.concatenate([items[:, 0], items[:, 2]], axis=1)
    return Batch(inputs, np.zeros(b, dtype=np.int64), items[:, 1],
                 np.ones((b, 1) + items.shape[3:]), None)


def weighted_error(pred: np.ndarray, batch: Batch, loss: str = "l1") -> tuple[float, np.ndarray]:
    """Mean over items of the weighted per-item error, and its gradient."""
    b, c = pred.shape[:2]
    diff = (pred - batch.target) * batch.weight
    count = c * batch.weight.reshape(b, -1).sum(axis=1).reshape(b, 1, 1, 1)
    if loss == "l1":
        per_item = np.abs(diff).reshape(b, -1).sum(axis=1) / count.ravel()
        grad = np.sign(diff) * batch.weight / count / b
    elif loss == "l2":
        per_item = (diff ** 2).reshape(b, -1).sum(axis=1) / count.ravel()
        grad = 2.0 * diff * batch.weight / count / b
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return float(per_item.mean()), grad


def make_optimizer(cfg: TrainConfig) -> AdamW:
    return AdamW(lr=cfg.lr, total_steps=cfg.steps, weight_decay=cfg.weight_decay, warmup=cfg.warmup)


def fit(net: TinyDenoiserNet, make_batch: Callable[[np.random.Generator], Batch], cfg: TrainConfig,
        loss: str = "l1", optimizer: AdamW | None = None, start_step: int = 0,
        stop_step: int | None = None,
        on_checkpoint: Callable[[int, TinyDenoiserNet, AdamW, TrainLog], None] | None = None,
        ) -> tuple[TinyDenoiserNet, AdamW, TrainLog]:
    """Run optimizer steps ``start_step .. stop_step - 1`` (default: to ``cfg.steps``)."""
    optimizer = optimizer if optimizer is not None else make_optimizer(cfg)
    if optimizer.step_count != start_step:
        raise ValueError(f"optimizer is at step {optimizer.step_count}, cannot start at {start_step}")
    stop = cfg.steps if stop_step is None else stop_step
    history = TrainLog()
    for step in range(start_step, stop):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, step]))
        batch = make_batch(rng)
        mask_arg = batch.masks if net.wants_mask else None
        pred, cache = net.forward_with_cache(batch.inputs, batch.t, mask=mask_arg)
        value, grad = weighted_error(pred.astype(np.float64), batch, loss)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {step}")
        lr = optimizer.lr_at(step)
        grads = net.backward(cache, grad)
        net.params = optimizer.step(net.params, grads)
        row = {"step": step, "loss": value, "lr": lr}
        if batch.masks is not None:
            lengths = [m.length for m in batch.masks]
            row.update(l_min=min(lengths), l_max=max(lengths))
        history.rows.append(row)
        if step % 100 == 0:
            log.info("step %d loss %.5f lr %.3g", step, value, lr)
        done = step + 1
        if on_checkpoint and cfg.checkpoint_every and (done % cfg.checkpoint_every == 0 or done == stop):
            on_checkpoint(done, net, optimizer, history)
    return net, optimizer, history


def train_msdsr(slices: np.ndarray, net: TinyDenoiserNet, cfg: TrainConfig, diff: DiffusionConfig,
                **kwargs) -> tuple[TinyDenoiserNet, AdamW, TrainLog]:
    """Train the noise predictor on high-resolution ``(K, C, n, n)`` slices."""
    slices = np.asarray(slices)
    if slices.ndim != 4 or slices.shape[0] == 0 or slices.shape[2] != slices.shape[3]:
        raise ValueError(f"need a non-empty stack of square slices, got {slices.shape}")
    if cfg.l_max >= slices.shape[2]:
        raise ValueError(f"l_max={cfg.l_max} must be below the slice size {slices.shape[2]}")
    sched = diff.build_schedule()
    return fit(net, lambda rng: msdsr_batch(slices, cfg, diff, sched, rng), cfg, diff.loss, **kwargs)


def train_regression(slices: np.ndarray, net: TinyDenoiserNet, cfg: TrainConfig,
                     **kwargs) -> tuple[TinyDenoiserNet, AdamW, TrainLog]:
    slices = np.asarray(slices)
    if slices.ndim != 4 or slices.shape[0] == 0:
        raise ValueError(f"need a non-empty stack of slices, got {slices.shape}")
    return fit(net, lambda rng: regression_batch(slices, cfg, rng), cfg, "l1", **kwargs)


def train_e2e(triplets: np.ndarray, net: TinyDenoiserNet, cfg: TrainConfig,
              **kwargs) -> tuple[TinyDenoiserNet, AdamW, TrainLog]:
    triplets = np.asarray(triplets)
    if triplets.ndim != 5 or triplets.shape[1] != 3 or triplets.shape[0] == 0:
        raise ValueError(f"need (K, 3, C, H, W) plane triplets, got {triplets.shape}")
    return fit(net, lambda rng: e2e_batch(triplets, cfg, rng), cfg, "l1", **kwargs)
