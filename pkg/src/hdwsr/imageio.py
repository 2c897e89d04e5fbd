"""PNG input/output as float tensors ``(3, H, W)`` in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
import torch

from .errors import IngestionError


def read_png(path: str | Path) -> torch.Tensor:
    """Decode an 8- or 16-bit PNG; grey images are replicated to RGB."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise IngestionError(f"cannot decode image {path}")
    if img.dtype == np.uint8:
        peak = 255.0
    elif img.dtype == np.uint16:
        peak = 65535.0
    else:
        raise IngestionError(f"{path}: unsupported sample type {img.dtype}")
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    elif img.shape[2] == 4:
        img = cv2.cvtColor(img, cv2.COLOR_BGRA2RGB)
    else:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    arr = img.astype(np.float32) / np.float32(peak)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def write_png(path: str | Path, img: torch.Tensor, bits: int = 8) -> None:
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    peak, dtype = (255, np.uint8) if bits == 8 else (65535, np.uint16)
    arr = img.detach().double().clamp(0, 1).cpu().numpy().transpose(1, 2, 0)
    arr = np.rint(arr * peak).astype(dtype)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(np.ascontiguousarray(arr), cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write {path}")
