"""Volumes, 2D slices, row masks and the VOXSR1 file format.

Volumes are stored channel-first as ``(C, H, W, Z)`` arrays; 2D images as
``(C, rows, cols)``. Slicing follows the rearrangements used at inference
time:

* XY slice at depth k  -> rows = H, cols = W
* XZ slice at height i -> rows = Z, cols = W
* YZ slice at width j  -> rows = Z, cols = H
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VOXSR1\0\0"
_HEADER = struct.Struct("<4I")


class VolumeError(ValueError):
    """Raised for malformed volumes, slices, masks or volume files."""


class Axis(str, enum.Enum):
    XY = "XY"
    XZ = "XZ"
    YZ = "YZ"


@dataclass(frozen=True)
class Volume:
    """Multi-channel float32 volume with layout ``(C, H, W, Z)``.

    ``z_factor`` records how many isotropic planes each stored plane stands
    for (1 for isotropic data, k after ``downsample_z(v, k)``).
    """

    data: np.ndarray
    z_factor: int = 1

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise VolumeError(f"volume must be 4D (C, H, W, Z), got shape {data.shape}")
        if min(data.shape) < 1:
            raise VolumeError(f"volume dimensions must be >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise VolumeError("volume contains non-finite values")
        if self.z_factor < 1:
            raise VolumeError(f"z_factor must be >= 1, got {self.z_factor}")
        if data is self.data:
            data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def is_isotropic(self) -> bool:
        _, h, w, z = self.data.shape
        return h == w == z


@dataclass(frozen=True)
class RowMask:
    """Rows of an ``n``-row image that carry the clean condition."""

    n: int
    indices: tuple[int, ...]
    b: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not 0 < len(idx) <= self.n:
            raise VolumeError(f"mask needs 1..{self.n} rows, got {len(idx)}")
        if any(i < 0 or i >= self.n for i in idx):
            raise VolumeError(f"mask indices must lie in [0, {self.n})")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise VolumeError("mask indices must be strictly increasing")
        b = np.zeros(self.n, dtype=np.float64)
        b[list(idx)] = 1.0
        b.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "b", b)

    @property
    def length(self) -> int:
        return len(self.indices)

    @property
    def free(self) -> np.ndarray:
        """Boolean vector, True on rows not in the mask."""
        return self.b == 0

    @classmethod
    def from_indices(cls, n: int, indices) -> "RowMask":
        return cls(n, tuple(sorted(int(i) for i in indices)))


@dataclass(frozen=True)
class TilingSpec:
    tile: tuple[int, int, int] = (32, 32, 32)
    stride: tuple[int, int, int] | None = None

    def strides(self) -> tuple[int, int, int]:
        return tuple(self.stride) if self.stride is not None else tuple(self.tile)


def _extent(v: Volume, axis: Axis) -> int:
    _, h, w, z = v.shape
    return {Axis.XY: z, Axis.XZ: h, Axis.YZ: w}[Axis(axis)]


def slice_volume(v: Volume, axis: Axis | str, index: int) -> np.ndarray:
    """Return the 2D cross-section of ``v`` as a ``(C, rows, cols)`` copy."""
    axis = Axis(axis)
    extent = _extent(v, axis)
    if not 0 <= index < extent:
        raise VolumeError(f"{axis.value} slice index {index} out of range [0, {extent})")
    d = v.data
    if axis is Axis.XY:
        img = d[:, :, :, index]
    elif axis is Axis.XZ:
        img = d[:, index, :, :].transpose(0, 2, 1)
    else:
        img = d[:, :, index, :].transpose(0, 2, 1)
    return np.array(img)


def slice_stack(v: Volume, axis: Axis | str) -> np.ndarray:
    """All slices along ``axis`` as an ``(m, C, rows, cols)`` array."""
    axis = Axis(axis)
    d = v.data
    if axis is Axis.XY:
        return np.ascontiguousarray(d.transpose(3, 0, 1, 2))
    if axis is Axis.XZ:
        return np.ascontiguousarray(d.transpose(1, 0, 3, 2))
    return np.ascontiguousarray(d.transpose(2, 0, 3, 1))


def assemble(slices: np.ndarray, axis: Axis | str, z_factor: int = 1) -> Volume:
    """Inverse of :func:`slice_stack`."""
    axis = Axis(axis)
    s = np.asarray(slices)
    if s.ndim != 4:
        raise VolumeError(f"expected (m, C, rows, cols) slices, got {s.shape}")
    if axis is Axis.XY:
        data = s.transpose(1, 2, 3, 0)
    elif axis is Axis.XZ:
        data = s.transpose(1, 0, 3, 2)
    else:
        data = s.transpose(1, 3, 0, 2)
    return Volume(np.ascontiguousarray(data), z_factor=z_factor)


def make_uniform_mask(n: int, length: int) -> RowMask:
    """Evenly spaced mask ``0, n/l, 2n/l, ...``; ``length`` must divide ``n``."""
    if length < 1 or length > n or n % length:
        raise VolumeError(f"uniform mask needs a divisor of n={n}, got l={length}")
    return RowMask(n, tuple(range(0, n, n // length)))


def sample_random_mask(n: int, l_min: int, l_max: int, rng: np.random.Generator) -> RowMask:
    """Draw l ~ U{l_min..l_max} then l distinct rows uniformly without replacement."""
    if not 0 < l_min <= l_max < n:
        raise VolumeError(f"need 0 < l_min <= l_max < n, got l_min={l_min} l_max={l_max} n={n}")
    length = int(rng.integers(l_min, l_max + 1))
    rows = rng.choice(n, size=length, replace=False)
    return RowMask.from_indices(n, rows)


def interlace(target: np.ndarray, condition: np.ndarray, mask: RowMask) -> np.ndarray:
    """Row-wise blend ``b * condition + (1 - b) * target``.

    ``condition`` is either a full n-row image or the l observed rows, which
    are placed onto the mask rows in order. Works on ``(C, n, N)`` images and
    on batches ``(B, C, n, N)``.
    """
    target = np.asarray(target)
    condition = np.asarray(condition)
    if target.ndim < 3 or target.shape[-2] != mask.n:
        raise VolumeError(f"target must have {mask.n} rows, got shape {target.shape}")
    rows = condition.shape[-2] if condition.ndim >= 2 else -1
    if condition.ndim != target.ndim or condition.shape[:-2] != target.shape[:-2] \
            or condition.shape[-1] != target.shape[-1]:
        raise VolumeError(f"condition shape {condition.shape} incompatible with target {target.shape}")
    out = target.copy()
    idx = list(mask.indices)
    if rows == mask.n:
        out[..., idx, :] = condition[..., idx, :]
    elif rows == mask.length:
        out[..., idx, :] = condition
    else:
        raise VolumeError(f"condition must have {mask.n} or {mask.length} rows, got {rows}")
    return out


def downsample_z(v: Volume, factor: int) -> Volume:
    """Keep every ``factor``-th XY plane starting at z = 0."""
    z = v.shape[3]
    if factor < 1 or z % factor:
        raise VolumeError(f"z factor {factor} must divide depth {z}")
    return Volume(v.data[:, :, :, ::factor], z_factor=v.z_factor * factor)


def average_volumes(a: Volume, b: Volume) -> Volume:
    if a.shape != b.shape:
        raise VolumeError(f"cannot average volumes of shapes {a.shape} and {b.shape}")
    # a + b is commutative in IEEE arithmetic, so the mean is order independent
    return Volume((a.data + b.data) * np.float32(0.5), z_factor=a.z_factor)


def _tile_starts(size: int, tile: int, stride: int) -> list[int]:
    starts = list(range(0, size - tile + 1, stride))
    if starts[-1] != size - tile:
        starts.append(size - tile)
    return starts


def _tile_grid(shape, spec: TilingSpec):
    _, h, w, z = shape
    tile, stride = spec.tile, spec.strides()
    if any(t < 1 for t in tile) or any(s < 1 for s in stride):
        raise VolumeError(f"tile and stride must be >= 1, got {spec}")
    if tile[0] > h or tile[1] > w or tile[2] > z:
        raise VolumeError(f"tile {tile} larger than volume {(h, w, z)}")
    return [
        (i, j, k)
        for i in _tile_starts(h, tile[0], stride[0])
        for j in _tile_starts(w, tile[1], stride[1])
        for k in _tile_starts(z, tile[2], stride[2])
    ]


def patch_volume(v: Volume, spec: TilingSpec) -> list[Volume]:
    """Cut ``v`` into tiles in (H, W, Z) raster order.

    The last tile along each axis is shifted back to end at the border, so
    tiles always cover the whole volume.
    """
    th, tw, tz = spec.tile
    return [
        Volume(v.data[:, i:i + th, j:j + tw, k:k + tz], z_factor=v.z_factor)
        for i, j, k in _tile_grid(v.shape, spec)
    ]


def stitch(tiles: list[Volume], spec: TilingSpec, shape: tuple[int, int, int, int]) -> Volume:
    """Reassemble tiles from :func:`patch_volume`; overlaps are averaged."""
    grid = _tile_grid(shape, spec)
    if len(tiles) != len(grid):
        raise VolumeError(f"expected {len(grid)} tiles for shape {shape}, got {len(tiles)}")
    th, tw, tz = spec.tile
    acc = np.zeros(shape, dtype=np.float64)
    count = np.zeros(shape[1:], dtype=np.float64)
    for (i, j, k), t in zip(grid, tiles):
        acc[:, i:i + th, j:j + tw, k:k + tz] += t.data
        count[i:i + th, j:j + tw, k:k + tz] += 1.0
    return Volume((acc / count).astype(np.float32), z_factor=tiles[0].z_factor)


def write_volume(path: str | Path, v: Volume) -> None:
    """Write ``v`` in VOXSR1 format, clamping values to [0, 1]."""
    c, h, w, z = v.shape
    data = np.clip(v.data, 0.0, 1.0).astype("<f4", copy=False)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(c, h, w, z))
        fh.write(np.ascontiguousarray(data).tobytes(order="C"))


def read_volume(path: str | Path) -> Volume:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise VolumeError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 8 + _HEADER.size:
        raise VolumeError(f"{path}: truncated header")
    c, h, w, z = _HEADER.unpack_from(raw, 8)
    count = c * h * w * z
    payload = raw[8 + _HEADER.size:]
    if len(payload) != 4 * count:
        raise VolumeError(f"{path}: expected {4 * count} payload bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(c, h, w, z)
    return Volume(data.astype(np.float32))
