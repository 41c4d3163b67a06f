"""Procedural isotropic phantoms and dataset assembly."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .volume import Volume, VolumeError, downsample_z, read_volume, write_volume

KINDS = ("grf", "cells")


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "grf"
    n: int = 32
    channels: int = 3
    seed: int = 0
    # grf: isotropic smoothing in voxels
    sigma: float = 1.5
    # cells
    count: int = 12
    radius: tuple[float, float] = (3.0, 6.0)
    nucleus_intensity: tuple[float, float] = (0.75, 0.95)
    cytoplasm_intensity: tuple[float, float] = (0.35, 0.55)
    background: float = 0.15
    texture: float = 0.05

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"phantom kind must be one of {KINDS}, got {self.kind!r}")
        if self.n < 8:
            raise ValueError(f"phantom side must be >= 8, got {self.n}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        lo, hi = self.radius
        if self.kind == "cells" and not 1.0 <= lo <= hi <= self.n / 2:
            raise ValueError(f"radius range {self.radius} invalid for n={self.n}")
        for name in ("nucleus_intensity", "cytoplasm_intensity"):
            a, b = getattr(self, name)
            if not 0.0 <= a <= b <= 1.0:
                raise ValueError(f"{name} must be a sub-range of [0, 1], got {(a, b)}")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("radius", "nucleus_intensity", "cytoplasm_intensity"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Cell:
    center: tuple[float, float, float]
    radius: float
    nucleus_radius: float
    nucleus: float
    cytoplasm: float


def _channel_tint(rng: np.random.Generator, channels: int) -> np.ndarray:
    # per-channel gains around 1, like a stain colour
    return np.clip(rng.uniform(0.8, 1.2, channels), 0.0, None)


def _gaussian_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    noise = rng.standard_normal(shape)
    # periodic boundary keeps the field stationary, hence isotropic statistics
    return ndimage.gaussian_filter(noise, sigma=sigma, mode="wrap")


def _grf(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.n
    fields = np.stack([_gaussian_field(rng, (n, n, n), spec.sigma) for _ in range(spec.channels)])
    lo, hi = fields.min(), fields.max()
    return (fields - lo) / (hi - lo)


def place_cells(spec: PhantomSpec, rng: np.random.Generator, attempts: int = 50) -> list[Cell]:
    """Random spheres, rejecting overlaps for up to ``attempts`` tries per cell."""
    cells: list[Cell] = []
    n = spec.n
    for _ in range(spec.count):
        for attempt in range(attempts):
            r = float(rng.uniform(*spec.radius))
            c = tuple(float(v) for v in rng.uniform(0, n, 3))
            clear = all(np.linalg.norm(np.subtract(c, o.center)) >= r + o.radius for o in cells)
            if clear or attempt == attempts - 1:
                break
        cells.append(Cell(
            center=c,
            radius=r,
            nucleus_radius=r * float(rng.uniform(0.35, 0.6)),
            nucleus=float(rng.uniform(*spec.nucleus_intensity)),
            cytoplasm=float(rng.uniform(*spec.cytoplasm_intensity)),
        ))
    return cells


def _cells(spec: PhantomSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[Cell]]:
    n = spec.n
    cells = place_cells(spec, rng)
    texture = _gaussian_field(rng, (n, n, n), 1.0)
    texture *= spec.texture / texture.std()
    grid = np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64),) * 3, indexing="ij"))
    base = np.full((n, n, n), spec.background)

    def dist(c):
        return np.sqrt(sum((grid[k] - c[k]) ** 2 for k in range(3)))

    # cytoplasm first, nuclei on top so a nucleus is never hidden by a later cell body
    for cell in cells:
        base[dist(cell.center) <= cell.radius] = cell.cytoplasm
    nucleus_mask = np.zeros((n, n, n), dtype=bool)
    for cell in cells:
        inside = dist(cell.center) <= cell.nucleus_radius
        base[inside] = cell.nucleus
        nucleus_mask |= inside
    tint = _channel_tint(rng, spec.channels)
    # texture everywhere except inside nuclei keeps nucleus voxels at their drawn value
    vol = np.stack([base * g for g in tint]) / tint.max()
    vol += np.where(nucleus_mask, 0.0, texture)[None]
    return np.clip(vol, 0.0, 1.0), cells


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Deterministic isotropic ``(C, n, n, n)`` phantom."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "grf":
        data = _grf(spec, rng)
    else:
        data, _ = _cells(spec, rng)
    return Volume(data.astype(np.float32))


def generate_cells(spec: PhantomSpec) -> tuple[Volume, list[Cell]]:
    """Cell phantom plus the cell list it was rendered from."""
    if spec.kind != "cells":
        raise ValueError("generate_cells needs a 'cells' spec")
    data, cells = _cells(spec, np.random.default_rng(spec.seed))
    return Volume(data.astype(np.float32)), cells


class CropOrigin(NamedTuple):
    volume: int
    plane: str
    z: int
    row: int
    col: int


def harvest_training_slices(volumes: list[Volume], size: int, count: int,
                            rng: np.random.Generator) -> tuple[np.ndarray, list[CropOrigin]]:
    """Random ``size x size`` crops from XY planes, with their origins."""
    if not volumes:
        raise VolumeError("no volumes to harvest from")
    for v in volumes:
        if size > v.shape[1] or size > v.shape[2]:
            raise VolumeError(f"crop size {size} exceeds XY extent {v.shape[1:3]}")
    crops = np.empty((count, volumes[0].channels, size, size), dtype=np.float32)
    origins = []
    for k in range(count):
        vi = int(rng.integers(len(volumes)))
        _, h, w, z = volumes[vi].shape
        zi = int(rng.integers(z))
        r = int(rng.integers(h - size + 1))
        c = int(rng.integers(w - size + 1))
        crops[k] = volumes[vi].data[:, r:r + size, c:c + size, zi]
        origins.append(CropOrigin(vi, "XY", zi, r, c))
    return crops, origins


def harvest_plane_triplets(volumes: list[Volume], size: int, count: int,
                           rng: np.random.Generator) -> np.ndarray:
    """``(count, 3, C, size, size)`` crops of XY planes z, z+1, z+2."""
    out = np.empty((count, 3, volumes[0].channels, size, size), dtype=np.float32)
    for k in range(count):
        v = volumes[int(rng.integers(len(volumes)))]
        _, h, w, z = v.shape
        if z < 3:
            raise VolumeError("need at least three planes for triplets")
        zi = int(rng.integers(z - 2))
        r = int(rng.integers(h - size + 1))
        c = int(rng.integers(w - size + 1))
        out[k] = v.data[:, r:r + size, c:c + size, zi:zi + 3].transpose(3, 0, 1, 2)
    return out


def make_eval_pairs(volumes: list[Volume], factor: int) -> list[tuple[Volume, Volume]]:
    """(z-subsampled, ground truth) pairs."""
    return [(downsample_z(v, factor), v) for v in volumes]


@dataclass
class ManifestEntry:
    path: str
    role: str
    group: int
    spec: dict


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    split_seed: int = 0
    digest: str = ""

    def paths(self, role: str) -> list[str]:
        return [e.path for e in self.entries if e.role == role]

    def check_disjoint(self) -> None:
        train = {e.group for e in self.entries if e.role == "train"}
        val = {e.group for e in self.entries if e.role == "val"}
        shared = train & val
        if shared:
            raise VolumeError(f"generator seeds shared between train and val: {sorted(shared)}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        entries = [ManifestEntry(**e) for e in d.pop("entries")]
        return cls(entries=entries, **d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())

    def load_volumes(self, role: str, root: str | Path | None = None) -> list[Volume]:
        base = Path(root) if root is not None else Path(".")
        return [read_volume(base / p) for p in self.paths(role)]


def split_specs(specs: list[PhantomSpec], n_val: int, split_seed: int) -> tuple[list[PhantomSpec], list[PhantomSpec]]:
    """Group-level split: each generator seed is one group and lands on one side only."""
    groups = sorted({s.seed for s in specs})
    rng = np.random.default_rng(split_seed)
    val_groups = set(rng.choice(groups, size=min(n_val, len(groups)), replace=False).tolist())
    train = [s for s in specs if s.seed not in val_groups]
    val = [s for s in specs if s.seed in val_groups]
    return train, val


def write_dataset(out_dir: str | Path, train: list[PhantomSpec], val: list[PhantomSpec],
                  split_seed: int = 0, digest: str = "") -> DatasetManifest:
    """Render every spec to VOXSR1 files under ``out_dir`` and return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(split_seed=split_seed, digest=digest)
    for role, specs in (("train", train), ("val", val)):
        for spec in specs:
            name = f"{role}_{spec.kind}_{spec.seed:06d}.vox"
            write_volume(out / name, generate_phantom(spec))
            # JSON-normal form so a saved manifest loads back equal
            manifest.entries.append(ManifestEntry(name, role, spec.seed, json.loads(json.dumps(asdict(spec)))))
    manifest.check_disjoint()
    return manifest
