"""Full-reference fidelity metrics and the FLOP report."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.signal import convolve2d

from .errors import DimensionError, ReportingError
from .ledger import FlopLedger

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak**2 / mse)``; identical inputs give ``math.inf``."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_plane(x: np.ndarray, y: np.ndarray, peak: float) -> float:
    w = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2

    def filt(z):
        return convolve2d(z, w, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    # same expression shape for both variances and the covariance keeps
    # ssim(a, a) exactly 1 and ssim(a, b) exactly symmetric
    var_x = filt(x * x) - mu_x * mu_x
    var_y = filt(y * y) - mu_y * mu_y
    cov = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of a ``(3, H, W)`` image in [0, 1]."""
    return (65.481 * img[0] + 128.553 * img[1] + 24.966 * img[2] + 16.0) / 255.0


def ssim(a, b, peak: float = 1.0, y_channel: bool = False) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid region only.

    Accepts ``(H, W)`` or ``(C, H, W)``; channels are averaged unless
    ``y_channel`` converts RGB to luma first.
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise DimensionError(f"ssim needs both sides >= {SSIM_WINDOW}, got {a.shape[-2:]}")
    if a.ndim == 2:
        return _ssim_plane(a, b, peak)
    if y_channel:
        return _ssim_plane(rgb_to_y(a), rgb_to_y(b), peak)
    planes = a.reshape(-1, *a.shape[-2:]), b.reshape(-1, *b.shape[-2:])
    return float(np.mean([_ssim_plane(x, y, peak) for x, y in zip(*planes)]))


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    flops: dict[str, int] | None = field(default=None)

    def as_dict(self) -> dict:
        out = {"psnr_db": self.psnr_db, "ssim": self.ssim}
        if self.flops is not None:
            out.update({f"flops.{k}": v for k, v in self.flops.items()})
        return out


def flop_report(ledger: FlopLedger) -> dict[str, int]:
    """Per-kernel multiply counts plus their exact sum under ``total``."""
    if not ledger:
        raise ReportingError("FLOP ledger is empty; run a forward pass with the ledger active")
    report = dict(sorted(ledger.counts.items()))
    report["total"] = sum(ledger.counts.values())
    return report


def format_value(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6f}"
    return str(v)


def format_kv(values: dict) -> str:
    """One ``name=value`` line per entry."""
    return "\n".join(f"{k}={format_value(v)}" for k, v in values.items())


def write_json(path, values: dict) -> None:
    def clean(v):
        if isinstance(v, float) and math.isinf(v):
            return "inf"
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, list):
            return [clean(x) for x in v]
        return v

    with open(path, "w") as fh:
        json.dump(clean(values), fh, indent=2)
