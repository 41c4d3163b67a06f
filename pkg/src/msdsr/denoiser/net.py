"""A small residual convolutional network with hand-written backprop.

Layout inside the network is NHWC so every 3x3 convolution is a single
im2col matrix product; the public call convention is channel-first
``(B, C, H, W)`` to match the rest of the package.

Architecture::

    h = conv_in(x)
    for each block:
        z1 = conv1(silu(h)) + dense(embed(t))     # per-feature-map time shift
        h  = h + conv2(silu(z1))
    out = conv_out(silu(h))                       # zero-initialised
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..volume import RowMask


class NumericError(ArithmeticError):
    """Non-finite parameters, gradients or losses."""


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 3
    out_channels: int = 3
    features: int = 32
    blocks: int = 4
    time_freqs: int = 32
    # append the row mask b as an extra input channel
    mask_channel: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if min(self.in_channels, self.out_channels, self.features, self.blocks, self.time_freqs) < 1:
            raise ValueError(f"network sizes must be positive: {self}")

    @property
    def input_channels(self) -> int:
        return self.in_channels + int(self.mask_channel)


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    f, e = cfg.features, 2 * cfg.time_freqs
    shapes = {"in.w": (3, 3, cfg.input_channels, f), "in.b": (f,)}
    for i in range(cfg.blocks):
        shapes.update({
            f"blocks.{i}.conv1.w": (3, 3, f, f),
            f"blocks.{i}.conv1.b": (f,),
            f"blocks.{i}.temb.w": (e, f),
            f"blocks.{i}.temb.b": (f,),
            f"blocks.{i}.conv2.w": (3, 3, f, f),
            f"blocks.{i}.conv2.b": (f,),
        })
    shapes.update({"out.w": (3, 3, f, cfg.out_channels), "out.b": (cfg.out_channels,)})
    return shapes


def infer_config(params: dict[str, np.ndarray], in_channels: int | None = None) -> NetConfig:
    """Recover the architecture from parameter shapes.

    The mask-channel flag cannot be told apart from an extra image channel,
    so ``in_channels`` disambiguates when given.
    """
    _, _, cin, f = params["in.w"].shape
    blocks = len({k.split(".")[1] for k in params if k.startswith("blocks.")})
    freqs = params["blocks.0.temb.w"].shape[0] // 2
    cout = params["out.w"].shape[3]
    mask = in_channels is not None and cin == in_channels + 1
    dtype = "float64" if params["in.w"].dtype == np.float64 else "float32"
    return NetConfig(cin - int(mask), cout, f, blocks, freqs, mask, dtype)


def init_params(cfg: NetConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-style init; the output convolution starts at zero so the net predicts 0."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("out.") or name.endswith(".b"):
            p = np.zeros(shape)
        elif name.endswith("temb.w"):
            p = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            p = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
            if ".conv2." in name:
                # keep the residual branches small at the start
                p *= 0.1
        params[name] = p.astype(cfg.dtype)
    return params


def count_params(params: dict[str, np.ndarray]) -> int:
    return sum(p.size for p in params.values())


def timestep_embedding(t, freqs: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal features ``[sin(t w_k), cos(t w_k)]`` with geometric w_k."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    w = np.exp(-math.log(10000.0) * np.arange(freqs) / freqs)
    arg = t[:, None] * w[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1).astype(dtype)


def _silu(x):
    s = np.negative(x)
    with np.errstate(over="ignore"):
        np.exp(s, out=s)
    s += 1.0
    np.reciprocal(s, out=s)
    return x * s, s


def _silu_grad(x, s):
    return s * (1.0 + x * (1.0 - s))


def _im2col(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))
    return cols.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, 9 * c)


def _conv(cols: np.ndarray, w: np.ndarray, bias: np.ndarray, shape) -> np.ndarray:
    b, h, wd, _ = shape
    out = cols @ w.reshape(-1, w.shape[3])
    out += bias
    return out.reshape(b, h, wd, w.shape[3])


def _conv_backward(cols: np.ndarray, w: np.ndarray, grad: np.ndarray, need_input: bool = True):
    b, h, wd, f = grad.shape
    g = grad.reshape(-1, f)
    dw = (cols.T @ g).reshape(w.shape)
    db = g.sum(axis=0)
    if not need_input:
        return dw, db, None
    c = w.shape[2]
    dcols = (g @ w.reshape(-1, f).T).reshape(b, h, wd, 3, 3, c)
    dxp = np.zeros((b, h + 2, wd + 2, c), dtype=grad.dtype)
    for di in range(3):
        for dj in range(3):
            dxp[:, di:di + h, dj:dj + wd, :] += dcols[:, :, :, di, dj, :]
    return dw, db, dxp[:, 1:-1, 1:-1, :]


def _check_finite(params: dict[str, np.ndarray]) -> None:
    for name, p in params.items():
        if not np.all(np.isfinite(p)):
            raise NumericError(f"parameter {name} has non-finite entries")


def _prepare_input(x, cfg: NetConfig, mask: RowMask | None, dtype) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected (B, {cfg.in_channels}, H, W) input, got {x.shape}")
    if cfg.mask_channel:
        if mask is None:
            raise ValueError("this network needs the row mask as input")
        masks = mask if isinstance(mask, (list, tuple)) else [mask] * x.shape[0]
        b = np.stack([np.broadcast_to(m.b[:, None], x.shape[2:]) for m in masks]).astype(dtype)
        x = np.concatenate([x, b[:, None]], axis=1)
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _forward(params, cfg: NetConfig, x_nhwc: np.ndarray, t, keep: bool):
    dtype = x_nhwc.dtype
    bsz = x_nhwc.shape[0]
    emb = timestep_embedding(np.broadcast_to(np.asarray(t), (bsz,)), cfg.time_freqs, dtype)
    cache = {"emb": emb, "blocks": []}
    cols = _im2col(x_nhwc)
    h = _conv(cols, params["in.w"], params["in.b"], x_nhwc.shape)
    if keep:
        cache["in.cols"] = cols
    for i in range(cfg.blocks):
        p = f"blocks.{i}."
        a0, s0 = _silu(h)
        cols1 = _im2col(a0)
        shift = emb @ params[p + "temb.w"] + params[p + "temb.b"]
        z1 = _conv(cols1, params[p + "conv1.w"], params[p + "conv1.b"], h.shape)
        z1 += shift[:, None, None, :]
        a1, s1 = _silu(z1)
        cols2 = _im2col(a1)
        z2 = _conv(cols2, params[p + "conv2.w"], params[p + "conv2.b"], h.shape)
        if keep:
            cache["blocks"].append((h, s0, cols1, z1, s1, cols2))
        h = h + z2
    a, s = _silu(h)
    cols = _im2col(a)
    out = _conv(cols, params["out.w"], params["out.b"], h.shape)
    if keep:
        cache.update(h=h, s=s, out_cols=cols)
    return out, cache


def _backward(params, cfg: NetConfig, cache, grad_nhwc: np.ndarray, exclude=()) -> dict[str, np.ndarray]:
    grads = {}
    dw, db, da = _conv_backward(cache["out_cols"], params["out.w"], grad_nhwc)
    grads["out.w"], grads["out.b"] = dw, db
    dh = da * _silu_grad(cache["h"], cache["s"])
    emb = cache["emb"]
    for i in reversed(range(cfg.blocks)):
        p = f"blocks.{i}."
        h_in, s0, cols1, z1, s1, cols2 = cache["blocks"][i]
        dw, db, da1 = _conv_backward(cols2, params[p + "conv2.w"], dh)
        grads[p + "conv2.w"], grads[p + "conv2.b"] = dw, db
        dz1 = da1 * _silu_grad(z1, s1)
        dshift = dz1.sum(axis=(1, 2))
        grads[p + "temb.w"] = emb.T @ dshift
        grads[p + "temb.b"] = dshift.sum(axis=0)
        dw, db, da0 = _conv_backward(cols1, params[p + "conv1.w"], dz1)
        grads[p + "conv1.w"], grads[p + "conv1.b"] = dw, db
        dh = dh + da0 * _silu_grad(h_in, s0)
    dw, db, _ = _conv_backward(cache["in.cols"], params["in.w"], dh, need_input=False)
    grads["in.w"], grads["in.b"] = dw, db
    return {k: v for k, v in grads.items() if k not in exclude}


def net_forward(params: dict[str, np.ndarray], x: np.ndarray, t, cfg: NetConfig | None = None,
                mask: RowMask | None = None) -> np.ndarray:
    """Evaluate the network on ``(B, C, H, W)`` input; returns the same layout."""
    cfg = cfg or infer_config(params)
    _check_finite(params)
    dtype = params["in.w"].dtype
    out, _ = _forward(params, cfg, _prepare_input(x, cfg, mask, dtype), t, keep=False)
    return out.transpose(0, 3, 1, 2)


def net_backward(params: dict[str, np.ndarray], x: np.ndarray, t, upstream: np.ndarray,
                 cfg: NetConfig | None = None, mask: RowMask | None = None,
                 exclude=()) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * net_forward(params, x, t))`` w.r.t. every parameter.

    Tensors named in ``exclude`` are treated as frozen and left out.
    """
    cfg = cfg or infer_config(params)
    _check_finite(params)
    dtype = params["in.w"].dtype
    x_nhwc = _prepare_input(x, cfg, mask, dtype)
    out, cache = _forward(params, cfg, x_nhwc, t, keep=True)
    g = np.asarray(upstream, dtype=dtype)
    if g.ndim == 3:
        g = g[None]
    if g.shape != (out.shape[0], out.shape[3], out.shape[1], out.shape[2]):
        raise ValueError(f"upstream gradient shape {g.shape} does not match output")
    return _backward(params, cfg, cache, np.ascontiguousarray(g.transpose(0, 2, 3, 1)), exclude)


class TinyDenoiserNet:
    """Parameters plus architecture; callable as a denoiser ``net(x, t)``."""

    def __init__(self, params: dict[str, np.ndarray], cfg: NetConfig):
        expected = param_shapes(cfg)
        if set(params) != set(expected):
            raise ValueError(f"parameter names do not match the architecture: "
                             f"{sorted(set(params) ^ set(expected))}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.cfg = cfg
        self.params = {k: np.asarray(v, dtype=cfg.dtype) for k, v in params.items()}
        _check_finite(self.params)

    @classmethod
    def create(cls, cfg: NetConfig, seed: int = 0) -> "TinyDenoiserNet":
        return cls(init_params(cfg, np.random.default_rng(seed)), cfg)

    @property
    def wants_mask(self) -> bool:
        return self.cfg.mask_channel

    @property
    def num_params(self) -> int:
        return count_params(self.params)

    def __call__(self, x: np.ndarray, t, mask: RowMask | None = None) -> np.ndarray:
        out, _ = _forward(self.params, self.cfg, _prepare_input(x, self.cfg, mask, self.cfg.dtype), t, keep=False)
        return out.transpose(0, 3, 1, 2)

    def forward_with_cache(self, x, t, mask=None):
        x_nhwc = _prepare_input(x, self.cfg, mask, self.cfg.dtype)
        out, cache = _forward(self.params, self.cfg, x_nhwc, t, keep=True)
        return out.transpose(0, 3, 1, 2), cache

    def backward(self, cache, upstream: np.ndarray, exclude=()) -> dict[str, np.ndarray]:
        g = np.ascontiguousarray(np.asarray(upstream, dtype=self.cfg.dtype).transpose(0, 2, 3, 1))
        return _backward(self.params, self.cfg, cache, g, exclude)

    def config_dict(self) -> dict:
        return asdict(self.cfg)
