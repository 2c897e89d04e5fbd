"""Pre-super-resolution front end.

Bicubic resampling uses the Catmull-Rom kernel (a = -0.5) on half-pixel
centres with replicated borders. Downsampling widens the kernel by the
scale factor (antialiasing), matching the usual imresize behaviour.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, IngestionError

PRESR_MODES = ("bicubic", "light-cnn", "external")


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = (((x - 5) * x + 8) * x - 4) * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=64)
def resize_matrix(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """Dense ``(n_out, n_in)`` interpolation matrix; rows sum to one."""
    scale = n_out / n_in
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    support = 2.0 * stretch
    centres = (np.arange(n_out) + 0.5) / scale - 0.5
    first = np.floor(centres - support).astype(int) + 1
    taps = int(np.ceil(2 * support)) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    weights = cubic_kernel((centres[:, None] - idx) / stretch)
    weights /= weights.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), np.clip(idx, 0, n_in - 1).ravel()), weights.ravel())
    return mat


def bicubic_resize(x: torch.Tensor, size: tuple[int, int], antialias: bool = True) -> torch.Tensor:
    """Resize the last two axes of ``x`` to ``size`` (height, width)."""
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return x.clone()
    rows = torch.from_numpy(resize_matrix(h, size[0], antialias))
    cols = torch.from_numpy(resize_matrix(w, size[1], antialias))
    out = torch.einsum("Hh,...hw,Ww->...HW", rows, x.double(), cols)
    return out.to(x.dtype)


def bicubic_upscale(lr: torch.Tensor, scale: int) -> torch.Tensor:
    h, w = lr.shape[-2:]
    return bicubic_resize(lr, (h * scale, w * scale)).clamp(0.0, 1.0)


def bicubic_downscale(hr: torch.Tensor, scale: int) -> torch.Tensor:
    h, w = hr.shape[-2:]
    if h % scale or w % scale:
        raise ConfigError(f"{h}x{w} is not divisible by scale {scale}")
    return bicubic_resize(hr, (h // scale, w // scale)).clamp(0.0, 1.0)


@dataclass
class PreSRSource:
    mode: str = "bicubic"
    scale: int = 4
    path: str | None = None
    trainable: bool = False

    def __post_init__(self):
        if self.mode not in PRESR_MODES:
            raise ConfigError(f"unknown PreSR mode {self.mode!r}; expected one of {PRESR_MODES}")
        if self.scale < 1:
            raise ConfigError(f"scale must be >= 1, got {self.scale}")


class LightCNN(nn.Module):
    """Bicubic upscaling plus a 3-layer residual convolution stack.

    The last layer starts at zero so an untrained stack is exactly bicubic.
    """

    def __init__(self, channels: int = 3, hidden: int = 32):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, 3, padding=1),
        )
        nn.init.zeros_(self.body[-1].weight)
        nn.init.zeros_(self.body[-1].bias)

    def forward(self, up: torch.Tensor) -> torch.Tensor:
        return (up + self.body(up)).clamp(0.0, 1.0)


def presr_generate(lr: torch.Tensor, src: PreSRSource, net: LightCNN | None = None) -> torch.Tensor:
    """PreSR image for ``lr`` of shape ``(..., C, h, w)`` at ``scale`` times the size."""
    if src.mode == "external":
        from .imageio import read_png

        if src.path is None:
            raise ConfigError("external PreSR mode needs a path")
        img = read_png(Path(src.path))
        want = (lr.shape[-3], lr.shape[-2] * src.scale, lr.shape[-1] * src.scale)
        if tuple(img.shape) != want:
            raise IngestionError(f"external PreSR image {src.path} is {tuple(img.shape)}, expected {want}")
        return img.to(lr.dtype).expand(*lr.shape[:-3], *want).clone()
    up = bicubic_upscale(lr, src.scale)
    if src.mode == "light-cnn":
        if net is None:
            raise ConfigError("light-cnn mode needs a LightCNN module")
        lead = up.shape[:-3]
        flat = up.reshape(-1, *up.shape[-3:])
        if src.trainable:
            out = net(flat)
        else:
            with torch.no_grad():
                out = net(flat)
        return out.reshape(*lead, *out.shape[-3:])
    return up
