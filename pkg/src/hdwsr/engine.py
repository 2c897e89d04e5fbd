"""Training, sampling and evaluation loops plus the checkpoint format."""
from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Callable, Iterable

import torch
import torch.nn.functional as F

from .config import RunConfig
from .data import PatchStream, eval_pairs, ingest
from .diffusion import compose_sr, form_pair, reverse_step
from .errors import ConfigError, DimensionError
from .ledger import FlopLedger
from .metrics import flop_report, psnr, ssim
from .model import HDWNet
from .presr import LightCNN, PreSRSource, presr_generate
from .wavelet import decompose_pyramid

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DETERMINISTIC_ENV = "HDWSR_DETERMINISTIC"


def configure_determinism() -> bool:
    """Honour ``HDWSR_DETERMINISTIC=1`` by forcing deterministic kernels."""
    on = os.environ.get(DETERMINISTIC_ENV, "0") not in ("", "0", "false", "False")
    if on:
        torch.use_deterministic_algorithms(True)
    return on


def presr_source(cfg: RunConfig) -> PreSRSource:
    d = cfg.data
    return PreSRSource(mode=d.presr, scale=d.scale, path=d.presr_path, trainable=d.presr_trainable)


def build_model(cfg: RunConfig) -> HDWNet:
    """Seeded construction; ablation-only modules are created after shared ones."""
    torch.manual_seed(cfg.seed)
    a = cfg.ablation
    net = HDWNet(cfg.model, sampling=a.sampling, attention=a.attention, topk=a.topk, guidance=a.guidance)
    if cfg.data.presr == "light-cnn":
        net.presr_net = LightCNN(cfg.model.in_channels)
    return net


def make_presr(net: HDWNet, lr: torch.Tensor, src: PreSRSource) -> torch.Tensor:
    return presr_generate(lr, src, getattr(net, "presr_net", None))


def save_checkpoint(path: str | Path, cfg: RunConfig, net: HDWNet, optimizer=None,
                    iteration: int = 0, rng: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "params": net.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "iteration": iteration,
        "rng": rng or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed to write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path: str | Path) -> tuple[RunConfig, HDWNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    cfg = RunConfig.from_dict(payload["config"])
    net = build_model(cfg)
    net.load_state_dict(payload["params"])
    return cfg, net, payload


class Trainer:
    """Joint HE-Net / HA-Net optimisation on residual pairs.

    ``stream`` defaults to :func:`ingest` over ``cfg.data.train_dir``; any
    object with ``batch``, ``state_dict`` and ``load_state_dict`` works.
    """

    def __init__(self, cfg: RunConfig, stream: PatchStream | None = None):
        self.cfg = cfg.validate()
        self.net = build_model(cfg)
        self.src = presr_source(cfg)
        if stream is None:
            if cfg.data.train_dir is None:
                raise ConfigError("data.train_dir is not set")
            stream = ingest(cfg.data.train_dir, cfg.data.patch, cfg.data.scale, cfg.seed)
        self.stream = stream
        params = [p for n, p in self.net.named_parameters()
                  if not n.startswith("presr_net.") or cfg.data.presr_trainable]
        self.optimizer = torch.optim.Adam(params, lr=cfg.optim.lr)
        self.gen = torch.Generator().manual_seed(cfg.seed + 1)
        self.iteration = 0
        self.history: list[tuple[int, float, float, float]] = []

    def step(self):
        lr, hr = self.stream.batch(self.cfg.optim.batch_size)
        presr = make_presr(self.net, lr, self.src)
        aux = None
        if self.src.mode == "light-cnn" and self.src.trainable:
            aux = F.l1_loss(presr, hr)
            presr = presr.detach()
        x0 = form_pair(hr, presr).to(hr.dtype)
        t = torch.randint(1, self.cfg.model.T + 1, (hr.shape[0],), generator=self.gen)
        eps = torch.randn(x0.shape, generator=self.gen)
        terms = self.net.losses(presr, x0, t, eps)
        loss = terms.total if aux is None else terms.total + aux
        if not torch.isfinite(loss):
            dump = Path(self.cfg.out_dir) / f"nan_batch_{self.iteration + 1}.pt"
            dump.parent.mkdir(parents=True, exist_ok=True)
            torch.save({"lr": lr, "hr": hr, "presr": presr, "t": t, "eps": eps,
                        "l_he": terms.l_he.detach(), "l_ha": terms.l_ha.detach()}, dump)
            raise FloatingPointError(f"non-finite loss at iteration {self.iteration + 1}; batch dumped to {dump}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.iteration += 1
        row = (self.iteration, terms.l_he.item(), terms.l_ha.item(), terms.total.item())
        self.history.append(row)
        return terms

    def rng_state(self) -> dict:
        return {"torch": self.gen.get_state(), "data": self.stream.state_dict()}

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.cfg, self.net, self.optimizer, self.iteration, self.rng_state())

    def restore(self, path: str | Path) -> None:
        payload = torch.load(path, map_location="cpu", weights_only=False)
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
        self.net.load_state_dict(payload["params"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.iteration = payload["iteration"]
        self.gen.set_state(payload["rng"]["torch"])
        self.stream.load_state_dict(payload["rng"]["data"])

    def run(self, iterations: int | None = None) -> Path:
        """Train up to ``iterations`` total steps, logging and checkpointing."""
        target = self.cfg.optim.iterations if iterations is None else iterations
        out = Path(self.cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "losses.csv"
        if not log_path.exists() or self.iteration == 0:
            log_path.write_text("iteration,l_he,l_ha,total\n")
        ckpt = out / "checkpoint.pt"
        with open(log_path, "a") as fh:
            while self.iteration < target:
                self.step()
                it, l_he, l_ha, total = self.history[-1]
                fh.write(f"{it},{l_he:.8g},{l_ha:.8g},{total:.8g}\n")
                if it % self.cfg.optim.log_every == 0:
                    log.info("iter %d  l_he=%.5f  l_ha=%.5f  total=%.5f", it, l_he, l_ha, total)
                if it % self.cfg.optim.checkpoint_every == 0:
                    self.save(ckpt)
        return self.save(ckpt)


def train(cfg: RunConfig, resume: str | Path | None = None, stream: PatchStream | None = None) -> Path:
    trainer = Trainer(cfg, stream)
    if resume is not None:
        trainer.restore(resume)
    return trainer.run()


@torch.no_grad()
def sample(net: HDWNet, lr: torch.Tensor, src: PreSRSource, seed: int = 0) -> torch.Tensor:
    """Super-resolve ``lr`` (``(3, h, w)`` or batched) with the full reverse chain."""
    squeeze = lr.dim() == 3
    if squeeze:
        lr = lr[None]
    step = 2**net.cfg.levels
    h, w = lr.shape[-2] * src.scale, lr.shape[-1] * src.scale
    if h % step or w % step:
        raise DimensionError(f"output size {h}x{w} is not divisible by 2**{net.cfg.levels}")
    net.eval()
    presr = make_presr(net, lr, src)
    _, guide = net.guidance(presr)
    gen = torch.Generator().manual_seed(seed)
    s = net.schedule
    x = torch.randn(presr.shape, generator=gen, dtype=presr.dtype)
    for t in range(s.T, 0, -1):
        eps = net.predict_noise(x, torch.full((x.shape[0],), t), guide)
        z = torch.randn(x.shape, generator=gen, dtype=x.dtype) if t > 1 else None
        x = reverse_step(x, eps, t, s, z)
    sr = compose_sr(presr, x / net.cfg.residual_scale)
    return sr[0] if squeeze else sr


def evaluate_pairs(pairs: Iterable[tuple[str, torch.Tensor, torch.Tensor]],
                   predictor: Callable[[torch.Tensor], torch.Tensor], y_channel: bool = False) -> dict:
    """Per-image PSNR/SSIM of ``predictor(lr)`` against ``hr`` and their means."""
    rows = []
    for name, lr, hr in pairs:
        sr = predictor(lr)
        rows.append({"image": name, "psnr": psnr(sr, hr), "ssim": ssim(sr, hr, y_channel=y_channel)})
    if not rows:
        raise ValueError("no images to evaluate")
    mean_psnr = sum(r["psnr"] for r in rows) / len(rows)
    mean_ssim = sum(r["ssim"] for r in rows) / len(rows)
    return {"images": rows, "mean_psnr": mean_psnr, "mean_ssim": mean_ssim}


def evaluate(checkpoint: str | Path, directory: str | Path, seed: int = 0, attention: str | None = None,
             topk: int | None = None, with_flops: bool = False, max_size: int | None = None) -> dict:
    """Evaluate a checkpoint on a directory; ``attention`` overrides the masking mode only."""
    cfg, net, _ = load_checkpoint(checkpoint)
    if attention is not None:
        net.set_ablation(attention=attention, topk=topk, guidance=net.guidance_mode)
    src = presr_source(cfg)
    multiple = cfg.data.scale * 2**cfg.model.levels
    pairs = eval_pairs(directory, cfg.data.scale, multiple, max_size or cfg.data.patch)
    ledger = FlopLedger()
    with ledger:
        result = evaluate_pairs(pairs, lambda lr: sample(net, lr, src, seed))
    result["attention"] = net.attention
    if with_flops:
        result["flops"] = flop_report(ledger)
    return result


def count_flops(net: HDWNet, size: int, seed: int = 0) -> dict[str, int]:
    """Ledger of one noise prediction on a random ``size`` x ``size`` input."""
    gen = torch.Generator().manual_seed(seed)
    presr = torch.rand(1, net.cfg.in_channels, size, size, generator=gen)
    x_t = torch.randn(presr.shape, generator=gen)
    with torch.no_grad():
        _, guide = net.guidance(presr)
        ledger = FlopLedger()
        with ledger:
            net.predict_noise(x_t, torch.tensor([max(1, net.cfg.T // 2)]), guide)
    return flop_report(ledger)


def compare_attention_flops(net: HDWNet, size: int, seed: int = 0, topk: int | None = None) -> dict[str, dict[str, int]]:
    """FLOP ledgers of the same weights under dtb, topk and dense masking."""
    saved = (net.attention, net.topk, net.guidance_mode)
    reports = {}
    try:
        for mode in ("dtb", "topk", "dense"):
            net.set_ablation(attention=mode, topk=topk, guidance=saved[2])
            reports[mode] = count_flops(net, size, seed)
    finally:
        net.set_ablation(*saved)
    return reports


def subband_mosaics(img: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """One ``[[LL, LH], [HL, HH]]`` tile per level for visual inspection.

    LL is divided by ``2**level`` to stay in [0, 1]; detail bands are shown
    as magnitudes stretched to their own maximum.
    """
    tiles = []
    for j, bands in enumerate(decompose_pyramid(img.double(), levels), start=1):
        ll = bands.ll / 2**j
        highs = []
        for band in bands.highs:
            mag = band.abs()
            peak = mag.max()
            highs.append(mag / peak if peak > 0 else mag)
        top = torch.cat([ll, highs[0]], dim=-1)
        bottom = torch.cat([highs[1], highs[2]], dim=-1)
        tiles.append(torch.cat([top, bottom], dim=-2).clamp(0, 1))
    return tiles
