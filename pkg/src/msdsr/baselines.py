"""Interpolation and regression baselines, plus the 3x3x3 blur post-process."""

from __future__ import annotations

import enum
import math

import numpy as np
from scipy import ndimage

from .volume import RowMask, Volume, VolumeError, interlace


class BaselineKind(str, enum.Enum):
    NN = "nn"
    LINEAR_Z = "linear"
    MS_REGRESSION = "ms-regression"
    E2E_INTERP = "e2e"


def nn_rows(obs: np.ndarray, factor: int, axis: int = -1) -> np.ndarray:
    """Replicate each sample ``factor`` times along ``axis`` (source index = floor(z / factor))."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    return np.repeat(obs, factor, axis=axis)


def linear_rows(obs: np.ndarray, factor: int, axis: int = -1) -> np.ndarray:
    """Linear interpolation at source positions z / factor.

    Positions past the last sample continue the last segment, so data that
    is linear along ``axis`` is reproduced exactly; results are clipped to
    [0, 1].
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    obs = np.moveaxis(np.asarray(obs), axis, -1)
    length = obs.shape[-1]
    if length < 2:
        raise VolumeError(f"linear interpolation needs at least 2 samples, got {length}")
    pos = np.arange(length * factor, dtype=np.float64) / factor
    lo = np.minimum(np.floor(pos).astype(int), length - 2)
    frac = pos - lo
    src = obs.astype(np.float64)
    out = src[..., lo] * (1.0 - frac) + src[..., lo + 1] * frac
    out = np.clip(out, 0.0, 1.0).astype(obs.dtype)
    # grid samples copied, not recomputed
    out[..., ::factor] = obs
    return np.moveaxis(out, -1, axis)


def nn_upsample_z(v: Volume, factor: int) -> Volume:
    return Volume(nn_rows(v.data, factor, axis=3))


def linear_upsample_z(v: Volume, factor: int) -> Volume:
    return Volume(linear_rows(v.data, factor, axis=3))


def rows_restorer(kind: str):
    """2D counterpart of the interpolators for uniformly masked slices."""

    def run(observations, mask: RowMask, rngs=None):
        factor = mask.n // mask.length
        fn = nn_rows if kind == BaselineKind.NN else linear_rows
        return fn(np.asarray(observations), factor, axis=-2)

    return run


def ms_regression_restore(model, observation: np.ndarray, mask: RowMask,
                          rng: np.random.Generator) -> np.ndarray:
    """One forward pass on observation rows interlaced into noise; observed rows copied through."""
    return ms_regression_batch(model, np.asarray(observation)[None], mask, [rng])[0]


def ms_regression_batch(model, observations: np.ndarray, mask: RowMask, rngs) -> np.ndarray:
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 4 or obs.shape[2] != mask.length:
        raise VolumeError(f"observations must be (B, C, {mask.length}, N), got {obs.shape}")
    if mask.length == mask.n:
        return obs.copy()
    b, c, _, width = obs.shape
    noise = np.stack([rng.standard_normal((c, mask.n, width)) for rng in rngs])
    x = interlace(noise, obs, mask)
    kwargs = {"mask": mask} if getattr(model, "wants_mask", False) else {}
    pred = np.asarray(model(x, 0, **kwargs), dtype=np.float64)
    return interlace(np.clip(pred, 0.0, 1.0), obs, mask)


def regression_restorer(model):
    def run(observations, mask, rngs):
        return ms_regression_batch(model, observations, mask, rngs)

    return run


def e2e_interp(model, plane_a: np.ndarray, plane_b: np.ndarray) -> np.ndarray:
    """Predict the plane midway between two ``(C, H, W)`` (or batched) planes."""
    a = np.asarray(plane_a, dtype=np.float64)
    b = np.asarray(plane_b, dtype=np.float64)
    if a.shape != b.shape:
        raise VolumeError(f"plane shapes differ: {a.shape} vs {b.shape}")
    single = a.ndim == 3
    if single:
        a, b = a[None], b[None]
    mid = np.asarray(model(np.concatenate([a, b], axis=1), 0), dtype=np.float64)
    mid = np.clip(mid, 0.0, 1.0)
    return mid[0] if single else mid


def e2e_recursive(model, planes: np.ndarray, depth: int) -> np.ndarray:
    """Insert a predicted plane between every neighbouring pair, ``depth`` times.

    ``planes`` is ``(L, C, H, W)``; the result has ``(L - 1) * 2**depth + 1`` planes.
    """
    planes = np.asarray(planes, dtype=np.float64)
    for _ in range(depth):
        if planes.shape[0] < 2:
            raise VolumeError("need at least two planes to interpolate")
        mids = e2e_interp(model, planes[:-1], planes[1:])
        out = np.empty((2 * planes.shape[0] - 1,) + planes.shape[1:])
        out[0::2] = planes
        out[1::2] = mids
        planes = out
    return planes


def e2e_upsample_z(model, v: Volume, factor: int) -> Volume:
    """Recursive midpoint prediction for power-of-two factors.

    The ``factor - 1`` planes past the last observation repeat the last
    interpolated plane.
    """
    depth = int(round(math.log2(factor))) if factor >= 1 else -1
    if depth < 0 or 2 ** depth != factor:
        raise VolumeError(f"E2E interpolation supports power-of-two factors, got {factor}")
    planes = v.data.transpose(3, 0, 1, 2)
    if planes.shape[0] < 2:
        raise VolumeError("E2E interpolation needs at least two planes")
    dense = e2e_recursive(model, planes, depth)
    tail = np.repeat(dense[-1:], factor - 1, axis=0)
    dense = np.concatenate([dense, tail])
    dense[::factor] = planes
    return Volume(dense.transpose(1, 2, 3, 0).astype(np.float32))


def gaussian_blur_3d(v: Volume) -> Volume:
    """Separable [1, 2, 1] / 4 kernel on each spatial axis, edges clamped."""
    kernel = np.array([0.25, 0.5, 0.25])
    out = v.data.astype(np.float64)
    for axis in (1, 2, 3):
        out = ndimage.convolve1d(out, kernel, axis=axis, mode="nearest")
    return Volume(out.astype(np.float32), z_factor=v.z_factor)
