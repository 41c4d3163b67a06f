"""SSIM, Frechet distances over image embeddings, and SliceFID."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .volume import Axis, Volume, VolumeError, make_uniform_mask, slice_stack

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(ValueError):
    pass


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window x window`` positions, averaged over channels.

    Local statistics use uniform weights (population variance/covariance).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"SSIM needs equal shapes, got {a.shape} and {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < window or a.shape[-2] < window:
        raise MetricError(f"images smaller than the {window}x{window} window: {a.shape}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    wa = sliding_window_view(a, (window, window), axis=(-2, -1))
    wb = sliding_window_view(b, (window, window), axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(smap.mean(axis=(-2, -1)).mean())


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = mean.size
        if cov.shape != (d, d):
            raise MetricError(f"covariance shape {cov.shape} does not match mean dim {d}")
        scale = max(1.0, float(np.abs(cov).max()))
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-8 * scale):
            raise MetricError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size


def fit_gaussian(features: np.ndarray, regularize: float = 1e-6) -> GaussianStats:
    """Sample mean and unbiased covariance; adds ``regularize * I`` when samples < dim."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    k, d = x.shape
    if k < 2:
        raise MetricError(f"need at least 2 samples to fit a Gaussian, got {k}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (k - 1)
    cov = 0.5 * (cov + cov.T)
    if k < d:
        cov = cov + regularize * np.eye(d)
    return GaussianStats(mean, cov, k)


def _psd_eigvals(m: np.ndarray, what: str, rel_tol: float = 1e-6):
    vals, vecs = np.linalg.eigh(m)
    tol = rel_tol * max(float(np.trace(m)), 1e-300)
    worst = float(vals.min())
    if worst < -tol:
        raise MetricError(f"{what} is not positive semi-definite: eigenvalue {worst:.3e} (tolerance {tol:.3e})")
    return np.clip(vals, 0.0, None), vecs


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = _psd_eigvals(m, "covariance")
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(p: GaussianStats, q: GaussianStats) -> float:
    """||mu_p - mu_q||^2 + tr(S_p + S_q - 2 (S_p S_q)^(1/2)).

    The trace of the matrix square root is taken from the eigenvalues of the
    symmetric product S_p^(1/2) S_q S_p^(1/2), which has the same spectrum as
    S_p S_q.
    """
    if p.dim != q.dim:
        raise MetricError(f"dimension mismatch: {p.dim} vs {q.dim}")
    diff = p.mean - q.mean
    root = psd_sqrt(p.cov)
    inner = root @ q.cov @ root
    inner = 0.5 * (inner + inner.T)
    vals, _ = _psd_eigvals(inner, "S_p^1/2 S_q S_p^1/2")
    value = float(diff @ diff + np.trace(p.cov) + np.trace(q.cov) - 2.0 * np.sqrt(vals).sum())
    return max(value, 0.0)


class FeatureEmbedder(Protocol):
    dim: int

    def embed(self, images: np.ndarray) -> np.ndarray:
        """``(K, C, H, W)`` images to ``(K, dim)`` features."""


class PooledPixelEmbedder:
    """Per-channel mean, standard deviation and mean absolute row/column differences."""

    def __init__(self, channels: int = 3):
        self.channels = channels
        self.dim = 4 * channels

    def embed(self, images: np.ndarray) -> np.ndarray:
        x = _as_batch(images, self.channels)
        dr = np.abs(np.diff(x, axis=2)).mean(axis=(2, 3))
        dc = np.abs(np.diff(x, axis=3)).mean(axis=(2, 3))
        return np.concatenate([x.mean(axis=(2, 3)), x.std(axis=(2, 3)), dr, dc], axis=1)


class RandomConvEmbedder:
    """Fixed-seed bank of zero-mean 3x3 filters with rectified responses.

    Half of the filters are random; the other half are the same filters
    rotated by 90 degrees, so orientation statistics (isotropy) are encoded.
    Features are the spatial mean and variance of ``|filter * image|`` for
    each filter (dim = 2 * filters). Zero-mean filters ignore flat intensity
    offsets. After :meth:`calibrate` the features are whitened with the mean
    and covariance of a reference set, so directions the reference holds
    nearly constant weigh as much as high-variance ones.
    """

    def __init__(self, channels: int = 3, filters: int = 16, seed: int = 0):
        if filters < 2 or filters % 2:
            raise MetricError(f"filters must be a positive even number, got {filters}")
        rng = np.random.default_rng(seed)
        half = rng.standard_normal((filters // 2, channels, 3, 3))
        w = np.concatenate([half, np.rot90(half, 1, axes=(2, 3))])
        w -= w.mean(axis=(1, 2, 3), keepdims=True)
        w /= np.sqrt((w ** 2).sum(axis=(1, 2, 3), keepdims=True))
        self.channels = channels
        self.weights = w
        self.dim = 2 * filters
        self.shift = np.zeros(self.dim)
        self.transform = np.eye(self.dim)

    def raw(self, images: np.ndarray) -> np.ndarray:
        x = _as_batch(images, self.channels)
        win = sliding_window_view(x, (3, 3), axis=(2, 3))  # K, C, H-2, W-2, 3, 3
        resp = np.abs(np.einsum("kchwij,fcij->kfhw", win, self.weights, optimize=True))
        return np.concatenate([resp.mean(axis=(2, 3)), resp.var(axis=(2, 3))], axis=1)

    def calibrate(self, reference: np.ndarray, floor: float = 1e-10) -> "RandomConvEmbedder":
        f = self.raw(reference)
        if len(f) < 2:
            raise MetricError("calibration needs at least 2 reference images")
        self.shift = f.mean(axis=0)
        vals, vecs = np.linalg.eigh(np.cov(f - self.shift, rowvar=False))
        # degenerate directions get a floor instead of an infinite gain
        vals = np.maximum(vals, floor * max(float(vals.max()), 1e-300))
        self.transform = vecs / np.sqrt(vals)
        return self

    def embed(self, images: np.ndarray) -> np.ndarray:
        return (self.raw(images) - self.shift) @ self.transform


def _as_batch(images, channels: int) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != channels:
        raise MetricError(f"expected (K, {channels}, H, W) images, got {x.shape}")
    return x


def make_embedder(kind: str = "randconv", channels: int = 3, seed: int = 0,
                  reference: np.ndarray | None = None) -> FeatureEmbedder:
    """Build an embedder; ``reference`` images calibrate the random-conv features."""
    if kind == "randconv":
        emb = RandomConvEmbedder(channels, 16, seed)
        return emb.calibrate(reference) if reference is not None else emb
    if kind == "pooled":
        return PooledPixelEmbedder(channels)
    raise MetricError(f"unknown embedder {kind!r}")


def image_stats(images: np.ndarray, embedder: FeatureEmbedder) -> GaussianStats:
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise MetricError("empty image set")
    return fit_gaussian(embedder.embed(images))


def fid(reference: np.ndarray, candidates: np.ndarray, embedder: FeatureEmbedder) -> float:
    """Frechet distance between embedded image sets ``(K, C, H, W)``."""
    return frechet_distance(image_stats(reference, embedder), image_stats(candidates, embedder))


@dataclass(frozen=True)
class SliceFidReport:
    fid_xy: float
    fid_xz: float
    fid_yz: float
    slice_fid: float

    @classmethod
    def from_components(cls, xy: float, xz: float, yz: float) -> "SliceFidReport":
        return cls(xy, xz, yz, (xy + xz + yz) / 3)

    def component(self, axis: Axis | str) -> float:
        return {Axis.XY: self.fid_xy, Axis.XZ: self.fid_xz, Axis.YZ: self.fid_yz}[Axis(axis)]


def axis_slices(volumes: list[Volume], axis: Axis | str) -> np.ndarray:
    return np.concatenate([slice_stack(v, axis) for v in volumes])


def slice_fid(reference: np.ndarray | GaussianStats, volumes: list[Volume],
              embedder: FeatureEmbedder) -> SliceFidReport:
    """FID of every XY, XZ and YZ slice of ``volumes`` against a 2D reference set."""
    if not volumes:
        raise MetricError("no volumes to score")
    for v in volumes:
        if not v.is_isotropic:
            raise VolumeError(f"SliceFID needs isotropic volumes, got {v.shape}")
    if isinstance(reference, GaussianStats):
        ref = reference
    else:
        reference = np.asarray(reference)
        if reference.shape[-1] != reference.shape[-2] or reference.shape[-1] != volumes[0].shape[1]:
            raise MetricError(f"reference images {reference.shape[1:]} do not match slices of {volumes[0].shape}")
        ref = image_stats(reference, embedder)
    parts = [frechet_distance(ref, image_stats(axis_slices(volumes, a), embedder))
             for a in (Axis.XY, Axis.XZ, Axis.YZ)]
    return SliceFidReport.from_components(*parts)


PAIRED_SCALES = (2, 4, 8)


def eval_paired_2d(restorer, slices: np.ndarray, scale: int, embedder: FeatureEmbedder,
                   seed: int = 0, chunk: int = 16) -> dict[str, float]:
    """Keep every ``scale``-th row of each square slice, restore, score FID and mean SSIM."""
    from .diffusion import slice_rng

    if scale not in PAIRED_SCALES:
        raise MetricError(f"scale must be one of {PAIRED_SCALES}, got {scale}")
    slices = np.asarray(slices, dtype=np.float64)
    n = slices.shape[2]
    mask = make_uniform_mask(n, n // scale)
    obs = slices[:, :, list(mask.indices), :]
    out = []
    for start in range(0, len(slices), chunk):
        idx = range(start, min(start + chunk, len(slices)))
        rngs = [slice_rng(seed, Axis.XY, i) for i in idx]
        out.append(np.asarray(restorer(obs[idx.start:idx.stop], mask, rngs), dtype=np.float64))
    restored = np.concatenate(out)
    scores = [ssim(a, b) for a, b in zip(slices, restored)]
    return {"fid": fid(slices, restored, embedder), "ssim": float(np.mean(scores))}


@dataclass(frozen=True)
class MetricRecord:
    method: str
    metric: str
    axis: str
    scale: int
    value: float
    seed: int
    config_digest: str


def write_records(records: list[MetricRecord], json_path: str | Path, csv_path: str | Path | None = None) -> None:
    """Write records as a JSON list and, optionally, as CSV rows."""
    Path(json_path).write_text(json.dumps([asdict(r) for r in records], indent=2))
    if csv_path is not None:
        csv_path = Path(csv_path)
        names = [f.name for f in fields(MetricRecord)]
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=names)
            writer.writeheader()
            for r in records:
                writer.writerow(asdict(r))
