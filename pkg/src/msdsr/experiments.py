"""End-to-end drivers: dataset generation, training runs and evaluations."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import (BaselineKind, e2e_upsample_z, gaussian_blur_3d, linear_upsample_z, nn_upsample_z,
                        regression_restorer, rows_restorer)
from .config import ConfigError, ExperimentConfig
from .denoiser.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .denoiser.net import NetConfig, TinyDenoiserNet, infer_config
from .denoiser.optim import AdamW
from .denoiser.train import TrainLog, make_optimizer, train_e2e, train_msdsr, train_regression
from .diffusion import diffusion_restorer, superresolve_along_axis, superresolve_volume
from .metrics import (MetricRecord, axis_slices, eval_paired_2d, image_stats, make_embedder, slice_fid,
                      write_records)
from .phantoms import (DatasetManifest, PhantomSpec, harvest_plane_triplets, harvest_training_slices,
                       split_specs, write_dataset)
from .volume import Axis, Volume, VolumeError, downsample_z

log = logging.getLogger(__name__)

MODEL_CODES = {"msdsr": 0, "ms-regression": 1, "e2e": 2}
LEARNED = tuple(MODEL_CODES)
CHECKPOINT_NAME = "checkpoint.vck"
LOSS_NAME = "loss.csv"
# methods restoring 2D slices; E2E interpolates between whole planes and has no 2D form
METHODS_2D = ("nn", "linear", "ms-regression", "msdsr")


class RunExistsError(ConfigError):
    pass


def phantom_specs(cfg: ExperimentConfig) -> tuple[list[PhantomSpec], list[PhantomSpec]]:
    """One spec per generator seed, kinds alternating, split into train and val groups."""
    d = cfg.data
    total = d.n_train + d.n_val
    specs = [
        PhantomSpec(kind=d.kinds[i % len(d.kinds)], n=d.n, channels=d.channels, seed=cfg.seed * 100_000 + i,
                    sigma=d.grf_sigma, count=d.cell_count)
        for i in range(total)
    ]
    return split_specs(specs, d.n_val, d.split_seed)


def generate_data(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> Path:
    """Render the dataset and write ``manifest.json``; returns the manifest path."""
    out = Path(out_dir) if out_dir is not None else Path(cfg.out_dir) / "data"
    train, val = phantom_specs(cfg)
    manifest = write_dataset(out, train, val, cfg.data.split_seed, cfg.digest())
    path = out / "manifest.json"
    manifest.save(path)
    return path


def manifest_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.data.manifest) if cfg.data.manifest else Path(cfg.out_dir) / "data" / "manifest.json"


def load_dataset(cfg: ExperimentConfig, role: str) -> list[Volume]:
    path = manifest_path(cfg)
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}; run gen-data first")
    manifest = DatasetManifest.load(path)
    manifest.check_disjoint()
    vols = manifest.load_volumes(role, path.parent)
    if not vols:
        raise VolumeError(f"manifest {path} has no {role} volumes")
    return vols


def net_config(cfg: ExperimentConfig, model: str) -> NetConfig:
    c = cfg.data.channels
    m = cfg.model
    e2e = model == "e2e"
    return NetConfig(2 * c if e2e else c, c, m.features, m.blocks, m.time_freqs,
                     m.mask_channel and not e2e, m.dtype)


def run_dir(cfg: ExperimentConfig, model: str) -> Path:
    return Path(cfg.out_dir) / f"train-{model}"


def _append_losses(path: Path, rows: list[dict], digest: str) -> None:
    names = ["step", "loss", "lr", "l_min", "l_max", "config_digest"]
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names, restval="")
        if new:
            writer.writeheader()
        for r in rows:
            writer.writerow({**r, "config_digest": digest})


def _truncate_losses(path: Path, stop: int) -> None:
    """Drop logged rows at or past ``stop`` (written after the checkpoint being resumed)."""
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    keep = [r for r in rows if int(r["step"]) < stop]
    path.unlink()
    if keep:
        digest = keep[0].get("config_digest", "")
        _append_losses(path, [{k: v for k, v in r.items() if k != "config_digest"} for r in keep], digest)


@dataclass
class TrainResult:
    checkpoint: Path
    net: TinyDenoiserNet
    log: TrainLog


def train(cfg: ExperimentConfig, model: str | None = None, force: bool = False,
          resume: bool = False) -> TrainResult:
    """Train one model kind into ``<out_dir>/train-<model>``.

    An existing run directory is refused unless ``force`` (start over) or
    ``resume`` (continue from its checkpoint) is set.
    """
    model = model or cfg.train.model
    if model not in MODEL_CODES:
        raise ConfigError(f"unknown model {model!r}; choose from {LEARNED}")
    tcfg = dataclasses.replace(cfg.train, model=model, seed=cfg.seed)
    digest = cfg.digest()
    out = run_dir(cfg, model)
    ckpt_path = out / CHECKPOINT_NAME
    loss_path = out / LOSS_NAME

    net = TinyDenoiserNet.create(net_config(cfg, model), seed=cfg.seed)
    optimizer: AdamW = make_optimizer(tcfg)
    start = 0
    if out.exists() and resume:
        if not ckpt_path.exists():
            raise CheckpointError(f"cannot resume: {ckpt_path} does not exist")
        ckpt = load_checkpoint(ckpt_path)
        if ckpt.digest != digest:
            raise ConfigError(f"checkpoint digest {ckpt.digest} does not match config digest {digest}")
        net = TinyDenoiserNet(ckpt.params, net.cfg)
        optimizer = ckpt.optimizer
        start = int(ckpt.meta.get("step", 0))
        _truncate_losses(loss_path, start)
    elif out.exists():
        if not force:
            raise RunExistsError(f"run directory {out} exists; pass --force to overwrite or --resume")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"config_digest": digest, **cfg.to_dict()}, indent=2))

    volumes = load_dataset(cfg, "train")
    rng = np.random.default_rng([cfg.seed, MODEL_CODES[model]])
    n = cfg.data.n
    written = 0

    def on_checkpoint(step, net_, opt_, history):
        nonlocal written
        save_checkpoint(ckpt_path, Checkpoint(digest, net_.params, opt_,
                                              {"step": step, "model": MODEL_CODES[model]}))
        _append_losses(loss_path, history.rows[written:], digest)
        written = len(history.rows)

    kw = dict(optimizer=optimizer, start_step=start, on_checkpoint=on_checkpoint)
    if start >= tcfg.steps:
        return TrainResult(ckpt_path, net, TrainLog())
    if model == "e2e":
        triplets = harvest_plane_triplets(volumes, n, cfg.data.crops, rng)
        net, _, history = train_e2e(triplets, net, tcfg, **kw)
    else:
        crops, _ = harvest_training_slices(volumes, n, cfg.data.crops, rng)
        if model == "msdsr":
            net, _, history = train_msdsr(crops, net, tcfg, cfg.diffusion, **kw)
        else:
            net, _, history = train_regression(crops, net, tcfg, **kw)
    return TrainResult(ckpt_path, net, history)


def load_model(path: str | Path, cfg: ExperimentConfig, model: str) -> TinyDenoiserNet:
    ckpt = load_checkpoint(path)
    code = ckpt.meta.get("model")
    if code is not None and int(code) != MODEL_CODES[model]:
        kind = {v: k for k, v in MODEL_CODES.items()}.get(int(code), "?")
        raise CheckpointError(f"{path} holds a {kind} model, expected {model}")
    c = cfg.data.channels
    arch = infer_config(ckpt.params, in_channels=2 * c if model == "e2e" else c)
    if arch.out_channels != c:
        raise CheckpointError(f"{path}: model outputs {arch.out_channels} channels, data has {c}")
    return TinyDenoiserNet(ckpt.params, arch)


def checkpoint_for(cfg: ExperimentConfig, model: str) -> Path:
    path = cfg.eval.checkpoints.get(model)
    path = Path(path) if path else run_dir(cfg, model) / CHECKPOINT_NAME
    if not path.exists():
        raise ConfigError(f"no checkpoint for {model} at {path}; train it or set eval.checkpoints.{model}")
    return path


class Models:
    """Lazily loaded learned models, keyed by method name."""

    def __init__(self, cfg: ExperimentConfig, preloaded: dict | None = None):
        self.cfg = cfg
        self.cache = dict(preloaded or {})

    def __getitem__(self, method: str) -> TinyDenoiserNet:
        if method not in self.cache:
            self.cache[method] = load_model(checkpoint_for(self.cfg, method), self.cfg, method)
        return self.cache[method]


def slice_restorer(cfg: ExperimentConfig, method: str, models: Models):
    if method in (BaselineKind.NN, BaselineKind.LINEAR_Z):
        return rows_restorer(method)
    if method == "ms-regression":
        return regression_restorer(models[method])
    if method == "msdsr":
        return diffusion_restorer(models[method], cfg.diffusion)
    raise ConfigError(f"method {method!r} has no slice restorer")


def superresolve(cfg: ExperimentConfig, low: Volume, method: str, models: Models, seed=0,
                 threads: int = 1, direction: str = "both", blur: bool = False,
                 parts: dict | None = None) -> Volume:
    """Upsample an anisotropic ``(C, n, n, l)`` volume to ``(C, n, n, n)`` with one method.

    For slice-based methods with ``direction="both"``, the un-blurred
    directional volumes are stored in ``parts`` under "xz" and "yz" when a
    dict is passed.
    """
    _, h, w, depth = low.shape
    if h != w or h % depth:
        raise VolumeError(f"volume {low.shape} needs H == W and depth dividing H")
    factor = h // depth
    if method == "nn":
        out = nn_upsample_z(low, factor)
    elif method == "linear":
        out = linear_upsample_z(low, factor)
    elif method == "e2e":
        out = e2e_upsample_z(models["e2e"], low, factor)
    else:
        restorer = slice_restorer(cfg, method, models)
        if direction == "both":
            both = superresolve_volume(low, restorer, seed, threads)
            out = both.volume
            if parts is not None:
                parts.update(xz=both.xz, yz=both.yz)
        else:
            out = superresolve_along_axis(low, Axis(direction.upper()), restorer, seed, threads)
    return gaussian_blur_3d(out) if blur else out


def method_label(method: str, direction: str = "both", blur: bool = False) -> str:
    label = method
    if direction != "both" and method in ("msdsr", "ms-regression"):
        label += f"-{direction}"
    return label + ("+blur" if blur else "")


def eval_3d(cfg: ExperimentConfig, factors=None, direction: str | None = None, blur: bool | None = None,
            threads: int | None = None, models: Models | None = None,
            volumes: list[Volume] | None = None, reference: np.ndarray | None = None) -> list[MetricRecord]:
    """SliceFID (and per-axis FID) of every configured method on held-out volumes."""
    factors = tuple(factors or cfg.eval.factors)
    direction = direction or cfg.eval.direction
    blur = cfg.eval.blur if blur is None else blur
    threads = threads or cfg.threads
    models = models or Models(cfg)
    if volumes is None:
        volumes = load_dataset(cfg, "val")[:cfg.eval.n_volumes]
    if reference is None:
        reference = axis_slices(load_dataset(cfg, "train"), Axis.XY)
    embedder = make_embedder(cfg.eval.embedder, volumes[0].channels, reference=reference)
    ref_stats = image_stats(reference, embedder)
    digest = cfg.digest()
    records = []
    for factor in factors:
        lows = [downsample_z(v, factor) for v in volumes]
        for method in cfg.eval.methods:
            label = method_label(method, direction, blur)
            log.info("eval-3d factor %d method %s", factor, label)
            outs = [superresolve(cfg, low, method, models, [cfg.seed, i], threads, direction, blur)
                    for i, low in enumerate(lows)]
            rep = slice_fid(ref_stats, outs, embedder)
            for axis, value in (("XY", rep.fid_xy), ("XZ", rep.fid_xz), ("YZ", rep.fid_yz)):
                records.append(MetricRecord(label, "fid", axis, factor, value, cfg.seed, digest))
            records.append(MetricRecord(label, "slice_fid", "mean", factor, rep.slice_fid, cfg.seed, digest))
    return records


def eval_2d(cfg: ExperimentConfig, scales=None, models: Models | None = None,
            slices: np.ndarray | None = None) -> list[MetricRecord]:
    """Paired 2D restoration of held-out XY slices: FID and mean SSIM per method and scale."""
    scales = tuple(scales or cfg.eval.factors)
    models = models or Models(cfg)
    if slices is None:
        pool = axis_slices(load_dataset(cfg, "val"), Axis.XY)
        rng = np.random.default_rng([cfg.seed, 7])
        take = min(cfg.eval.n_slices, len(pool))
        slices = pool[np.sort(rng.choice(len(pool), size=take, replace=False))]
    embedder = make_embedder(cfg.eval.embedder, slices.shape[1], reference=slices)
    digest = cfg.digest()
    records = []
    for scale in scales:
        for method in (m for m in cfg.eval.methods if m in METHODS_2D):
            log.info("eval-2d scale %d method %s", scale, method)
            res = eval_paired_2d(slice_restorer(cfg, method, models), slices, scale, embedder, seed=cfg.seed)
            records.append(MetricRecord(method, "fid", "XY", scale, res["fid"], cfg.seed, digest))
            records.append(MetricRecord(method, "ssim", "XY", scale, res["ssim"], cfg.seed, digest))
    return records


def save_report(records: list[MetricRecord], out_dir: str | Path, name: str) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = out / f"{name}.json", out / f"{name}.csv"
    write_records(records, *paths)
    return paths
