"""Independent reference implementations used as test oracles."""

import numpy as np

from msdsr.denoiser.net import NetConfig, init_params, net_backward, net_forward


def ssim_bruteforce(a, b, window=8, data_range=1.0):
    """Plain-loop SSIM: every window position, uniform weights, population moments."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    per_channel = []
    for ch in range(a.shape[0]):
        vals = []
        for i in range(a.shape[1] - window + 1):
            for j in range(a.shape[2] - window + 1):
                x = a[ch, i:i + window, j:j + window].ravel()
                y = b[ch, i:i + window, j:j + window].ravel()
                mx, my = x.mean(), y.mean()
                vx = ((x - mx) ** 2).mean()
                vy = ((y - my) ** 2).mean()
                cxy = ((x - mx) * (y - my)).mean()
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
        per_channel.append(np.mean(vals))
    return float(np.mean(per_channel))


def random_net(cfg: NetConfig, seed: int) -> dict:
    """float64 parameters with every tensor non-zero, so all gradients are informative."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    for name, p in params.items():
        params[name] = p + 0.1 * rng.standard_normal(p.shape)
    return params


def gradient_check(cfg: NetConfig, seed: int, size=(2, 5, 6), h=1e-4) -> dict[str, float]:
    """Per-tensor relative error between analytic and central-difference gradients.

    The scalar objective is ``sum(upstream * net(x, t))`` for random ``x``,
    ``t`` and ``upstream``; every scalar parameter entry is perturbed.
    """
    rng = np.random.default_rng(seed)
    params = random_net(cfg, seed)
    batch, rows, cols = size
    x = rng.standard_normal((batch, cfg.in_channels, rows, cols))
    t = rng.integers(1, 200, size=batch)
    upstream = rng.standard_normal((batch, cfg.out_channels, rows, cols))
    mask = None
    if cfg.mask_channel:
        from msdsr.volume import RowMask
        mask = RowMask(rows, (0, rows - 1))
    analytic = net_backward(params, x, t, upstream, cfg, mask=mask)

    def objective(p):
        return float(np.sum(upstream * net_forward(p, x, t, cfg, mask=mask)))

    errors = {}
    for name, p in params.items():
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = objective(params)
            p[idx] = orig - h
            down = objective(params)
            p[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        diff = np.linalg.norm(analytic[name] - numeric)
        scale = max(np.linalg.norm(analytic[name]), np.linalg.norm(numeric), 1e-12)
        errors[name] = float(diff / scale)
    return errors
