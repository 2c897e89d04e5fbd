"""Deterministic synthetic images for tests and experiments."""
from __future__ import annotations

import math

import torch


def textured_patch(size: int = 64, seed: int = 0) -> torch.Tensor:
    """RGB image in [0, 1]: colour gradient, soft-edged discs and stripes."""
    g = torch.Generator().manual_seed(seed)
    yy, xx = torch.meshgrid(
        torch.linspace(0, 1, size, dtype=torch.float64),
        torch.linspace(0, 1, size, dtype=torch.float64),
        indexing="ij",
    )
    base = torch.rand(3, 3, generator=g, dtype=torch.float64)
    img = base[:, 0, None, None] * 0.4 + 0.3 * base[:, 1, None, None] * xx + 0.3 * base[:, 2, None, None] * yy
    for _ in range(4):
        cy, cx, r = torch.rand(3, generator=g, dtype=torch.float64).tolist()
        r = 0.08 + 0.2 * r
        colour = torch.rand(3, generator=g, dtype=torch.float64)
        dist = ((yy - cy) ** 2 + (xx - cx) ** 2).sqrt()
        alpha = torch.sigmoid((r - dist) * size / 1.5)
        img = img * (1 - alpha) + colour[:, None, None] * alpha
    angle = float(torch.rand(1, generator=g)) * math.pi
    freq = size / 6.0
    stripes = torch.sin(2 * math.pi * freq * (xx * math.cos(angle) + yy * math.sin(angle)))
    img = img + 0.06 * stripes
    return img.clamp(0, 1).float()
