"""Orthonormal 2D Haar transform and multi-level pyramid.

All functions act on the last two axes of a tensor, so ``(C, H, W)`` and
``(B, C, H, W)`` inputs are both accepted. Channels are transformed
independently.
"""
from __future__ import annotations

from typing import NamedTuple

import torch

from .errors import ContractError, DimensionError


class SubbandSet(NamedTuple):
    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor

    @property
    def highs(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.lh, self.hl, self.hh


def _check_finite(x: torch.Tensor) -> None:
    if not torch.isfinite(x).all():
        raise ContractError("feature map contains NaN or Inf")


def dwt2_haar(x: torch.Tensor) -> SubbandSet:
    """Single-level Haar analysis of every 2x2 block.

    With a block ``[[p00, p01], [p10, p11]]``::

        ll = (p00 + p01 + p10 + p11) / 2
        lh = (p00 - p01 + p10 - p11) / 2
        hl = (p00 + p01 - p10 - p11) / 2
        hh = (p00 - p01 - p10 + p11) / 2

    Sums are grouped pairwise so a constant block gives ``ll == 2c`` and zero
    detail bands bit-exactly.
    """
    if x.dim() < 2:
        raise DimensionError("expected at least 2 dimensions (H, W)")
    h, w = x.shape[-2:]
    if h % 2:
        raise DimensionError(f"height {h} is odd; Haar DWT needs even height")
    if w % 2:
        raise DimensionError(f"width {w} is odd; Haar DWT needs even width")
    _check_finite(x)
    p00 = x[..., 0::2, 0::2]
    p01 = x[..., 0::2, 1::2]
    p10 = x[..., 1::2, 0::2]
    p11 = x[..., 1::2, 1::2]
    top_sum, top_diff = p00 + p01, p00 - p01
    bot_sum, bot_diff = p10 + p11, p10 - p11
    return SubbandSet(
        ll=(top_sum + bot_sum) / 2,
        lh=(top_diff + bot_diff) / 2,
        hl=(top_sum - bot_sum) / 2,
        hh=(top_diff - bot_diff) / 2,
    )


def idwt2_haar(s: SubbandSet) -> torch.Tensor:
    """Exact inverse of :func:`dwt2_haar`."""
    ll, lh, hl, hh = s
    if not (ll.shape == lh.shape == hl.shape == hh.shape):
        raise DimensionError(
            "subband shapes differ: "
            f"ll={tuple(ll.shape)} lh={tuple(lh.shape)} hl={tuple(hl.shape)} hh={tuple(hh.shape)}"
        )
    for band in s:
        _check_finite(band)
    a, b = ll + lh, ll - lh
    c, d = hl + hh, hl - hh
    p00 = (a + c) / 2
    p01 = (b + d) / 2
    p10 = (a - c) / 2
    p11 = (b - d) / 2
    *lead, h, w = ll.shape
    out = ll.new_empty(*lead, 2 * h, 2 * w)
    out[..., 0::2, 0::2] = p00
    out[..., 0::2, 1::2] = p01
    out[..., 1::2, 0::2] = p10
    out[..., 1::2, 1::2] = p11
    return out


def max_levels(h: int, w: int) -> int:
    """Largest L such that both sides are divisible by 2**L."""
    levels = 0
    while h % 2 == 0 and w % 2 == 0 and h > 1 and w > 1:
        h, w, levels = h // 2, w // 2, levels + 1
    return levels


def decompose_pyramid(x: torch.Tensor, levels: int) -> list[SubbandSet]:
    """Recursive Haar decomposition, finest level first.

    Level ``j`` transforms the ``ll`` band of level ``j - 1``. No channel
    mixing happens here; networks interleave their own convolutions.
    """
    if levels < 1:
        raise DimensionError(f"levels must be >= 1, got {levels}")
    h, w = x.shape[-2:]
    step = 2**levels
    if h % step or w % step:
        raise DimensionError(
            f"{h}x{w} is not divisible by 2**{levels}; at most {max_levels(h, w)} levels fit"
        )
    out = []
    for _ in range(levels):
        bands = dwt2_haar(x)
        out.append(bands)
        x = bands.ll
    return out


def reconstruct_pyramid(pyramid: list[SubbandSet]) -> torch.Tensor:
    """Inverse of :func:`decompose_pyramid`."""
    x = pyramid[-1].ll
    for bands in reversed(pyramid):
        x = idwt2_haar(SubbandSet(x, *bands.highs))
    return x
