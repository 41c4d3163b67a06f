"""Closed-form noise predictor for i.i.d. Gaussian pixel data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffusion import NoiseSchedule


@dataclass(frozen=True)
class GaussianOracleDenoiser:
    """Exact E[eps | x_t] when every pixel of x_0 is N(mean, var).

    With x_t = sqrt(abar) x_0 + sqrt(1 - abar) eps, x_t and eps are jointly
    Gaussian and the regression of eps on x_t is linear:

        E[eps | x_t] = (x_t - sqrt(abar) mean) sqrt(1 - abar) / (abar var + 1 - abar)
    """

    mean: float
    var: float
    schedule: NoiseSchedule

    def __post_init__(self):
        if not self.var > 0:
            raise ValueError(f"variance must be positive, got {self.var}")

    def __call__(self, x_t: np.ndarray, t) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        abar = self.schedule.alpha_bars[np.asarray(t)]
        if abar.ndim:
            abar = abar.reshape(-1, *([1] * (x_t.ndim - 1)))
        gain = np.sqrt(1.0 - abar) / (abar * self.var + 1.0 - abar)
        return (x_t - np.sqrt(abar) * self.mean) * gain

    predict = __call__
