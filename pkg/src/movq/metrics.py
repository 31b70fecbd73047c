"""Paired image-quality metrics on ``[-1, 1]`` images (dynamic range 2).

Images are channels-first, ``(C, H, W)`` or batched ``(B, C, H, W)``; numpy
arrays and tensors are both accepted.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

DATA_RANGE = 2.0
PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.detach().to(torch.float64).cpu()
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def _pair(x, y) -> tuple[torch.Tensor, torch.Tensor]:
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float((x - y).pow(2).mean())


def psnr(x, y) -> float:
    err = mse(x, y)
    if err < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(DATA_RANGE ** 2 / err))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(x, y) -> float:
    """Mean local SSIM over all windows and channels.

    Windows wrap around the image borders (periodic boundary), so every pixel
    centres exactly one window and the score is invariant to joint circular
    shifts of ``x`` and ``y``.
    """
    x, y = _pair(x, y)
    if x.dim() == 3:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    if x.dim() != 4:
        raise ValueError(f"expected (C, H, W) or (B, C, H, W) images, got {tuple(x.shape)}")
    b, c, h, w = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    kernel = gaussian_window().view(1, 1, SSIM_WINDOW, SSIM_WINDOW)
    pad = SSIM_WINDOW // 2

    def local_mean(t):
        t = F.pad(t.reshape(b * c, 1, h, w), (pad, pad, pad, pad), mode="circular")
        return F.conv2d(t, kernel)

    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    mu_x, mu_y = local_mean(x), local_mean(y)
    var_x = local_mean(x * x) - mu_x ** 2
    var_y = local_mean(y * y) - mu_y ** 2
    cov = local_mean(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


def diversity(samples) -> float:
    """Mean per-pixel MSE over all unordered pairs of samples."""
    samples = [_as_tensor(s) for s in samples]
    if len(samples) < 2:
        raise ValueError("diversity needs at least two samples")
    pairs = list(itertools.combinations(samples, 2))
    return float(sum(mse(a, b) for a, b in pairs) / len(pairs))


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    mse: float
    codebook_usage: float
    perplexity: float
    sample_count: int

    def to_record(self, **extra) -> str:
        """One flat JSON object on a single line."""
        return json.dumps({**asdict(self), **extra}, sort_keys=True)
