"""Image ingestion: seeded random HR crops with bicubic-degraded LR partners."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch

from .errors import IngestionError
from .imageio import read_png
from .presr import bicubic_downscale

log = logging.getLogger(__name__)


def list_pngs(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")


def load_images(directory: str | Path, min_size: int = 1) -> list[tuple[str, torch.Tensor]]:
    """Decode every PNG in ``directory``, skipping unreadable or small ones."""
    images = []
    for path in list_pngs(directory):
        try:
            img = read_png(path)
        except IngestionError as exc:
            log.warning("skipping %s: %s", path.name, exc)
            continue
        if min(img.shape[-2:]) < min_size:
            log.warning("skipping %s: %dx%d is smaller than %d", path.name, *img.shape[-2:], min_size)
            continue
        images.append((path.name, img))
    if not images:
        raise IngestionError(f"no usable images in {directory}")
    return images


class PatchStream:
    """Endless, seeded stream of ``(lr, hr)`` crops.

    The generator state is exposed through :meth:`state_dict` so a resumed
    run continues with the same crop sequence.
    """

    def __init__(self, images: list[torch.Tensor], patch: int, scale: int, seed: int):
        if patch % scale:
            raise IngestionError(f"patch {patch} is not divisible by scale {scale}")
        self.images = images
        self.patch = patch
        self.scale = scale
        self.rng = np.random.default_rng(seed)

    def __iter__(self):
        return self

    def __next__(self) -> tuple[torch.Tensor, torch.Tensor]:
        img = self.images[int(self.rng.integers(len(self.images)))]
        h, w = img.shape[-2:]
        top = int(self.rng.integers(h - self.patch + 1))
        left = int(self.rng.integers(w - self.patch + 1))
        hr = img[:, top : top + self.patch, left : left + self.patch].contiguous()
        return bicubic_downscale(hr, self.scale), hr

    def batch(self, size: int) -> tuple[torch.Tensor, torch.Tensor]:
        pairs = [next(self) for _ in range(size)]
        return torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])

    def state_dict(self) -> dict:
        return self.rng.bit_generator.state

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def ingest(directory: str | Path, patch: int, scale: int, seed: int) -> PatchStream:
    images = [img for _, img in load_images(directory, min_size=patch)]
    return PatchStream(images, patch, scale, seed)


def center_crop(img: torch.Tensor, multiple: int, max_size: int | None = None) -> torch.Tensor:
    """Largest centred crop whose sides are multiples of ``multiple`` (capped at ``max_size``)."""
    h, w = img.shape[-2:]
    th, tw = h - h % multiple, w - w % multiple
    if max_size is not None:
        cap = max_size - max_size % multiple
        th, tw = min(th, cap), min(tw, cap)
    if th == 0 or tw == 0:
        raise IngestionError(f"{h}x{w} image is smaller than the required multiple {multiple}")
    top, left = (h - th) // 2, (w - tw) // 2
    return img[..., top : top + th, left : left + tw]


def eval_pairs(directory: str | Path, scale: int, multiple: int, max_size: int | None = None):
    """``(name, lr, hr)`` triples.

    A directory with ``lr/`` and ``hr/`` subfolders is read as matched pairs
    by file name; otherwise every PNG is an HR image degraded on the fly.
    """
    directory = Path(directory)
    hr_dir, lr_dir = directory / "hr", directory / "lr"
    out = []
    if hr_dir.is_dir() and lr_dir.is_dir():
        lr_images = dict(load_images(lr_dir))
        for name, hr in load_images(hr_dir):
            if name not in lr_images:
                log.warning("skipping %s: no LR partner", name)
                continue
            lr = lr_images[name]
            if tuple(lr.shape[-2:]) != (hr.shape[-2] // scale, hr.shape[-1] // scale):
                log.warning("skipping %s: LR size does not match HR / %d", name, scale)
                continue
            hr = center_crop(hr, multiple, max_size)
            lr = center_crop(lr, multiple // scale, None if max_size is None else max_size // scale)
            if tuple(lr.shape[-2:]) != (hr.shape[-2] // scale, hr.shape[-1] // scale):
                log.warning("skipping %s: LR and HR crops disagree", name)
                continue
            out.append((name, lr, hr))
    else:
        for name, hr in load_images(directory, min_size=multiple):
            hr = center_crop(hr, multiple, max_size)
            out.append((name, bicubic_downscale(hr, scale), hr))
    if not out:
        raise IngestionError(f"no usable evaluation pairs in {directory}")
    return out
