"""HE-Net (guidance extractor) and HA-Net (noise predictor).

Both nets downsample with the Haar transform. Level ``j`` (0-indexed) works
at ``1 / 2**(j+1)`` of the input resolution with ``base_channels * 2**j``
channels. HE-Net exports its detail bands as guidance. HA-Net's encoders
attend from their own low band to that guidance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn

from .attention import ATTENTION_MODES, DFABlock, run_stack
from .diffusion import LossTerms, NoiseSchedule, loss_ha, loss_total, make_schedule, q_sample
from .errors import ConfigError, DimensionError
from .wavelet import SubbandSet, dwt2_haar, idwt2_haar


PREDICTIONS = ("eps", "x0", "v")


@dataclass
class ModelConfig:
    in_channels: int = 3
    base_channels: int = 16
    levels: int = 3
    dfa_repeats: list[int] = field(default_factory=lambda: [2, 4, 4])
    decoder_repeats: list[int] = field(default_factory=lambda: [4, 6, 6])
    encoder_swin: int = 2
    pfa_repeats: int = 2
    swin_window: int = 8
    heads: int = 1
    mlp_ratio: float = 2.0
    time_dim: int = 64
    beta_weight: float = 0.2
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    # the residual is multiplied by this before diffusion and divided after
    # sampling; powers of two keep the round trip exact
    residual_scale: float = 1.0
    # what the HA-Net head F targets; predict_noise always returns noise.
    # "eps": F is the noise. "x0": F is the residual and the noise is
    # (x_t - sqrt(ab) * F) / sqrt(1 - ab). "v": the noise is
    # sqrt(1 - ab) * x_t + sqrt(ab) * F, so F is the velocity
    prediction: str = "eps"

    def __post_init__(self):
        self.dfa_repeats = list(self.dfa_repeats)
        self.decoder_repeats = list(self.decoder_repeats)
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        for name in ("dfa_repeats", "decoder_repeats"):
            reps = getattr(self, name)
            if len(reps) != self.levels:
                raise ConfigError(f"{name} has {len(reps)} entries for {self.levels} levels")
            if min(reps) < 1:
                raise ConfigError(f"{name} entries must be >= 1, got {reps}")
        if min(self.base_channels, self.swin_window, self.heads, self.pfa_repeats) < 1:
            raise ConfigError("base_channels, swin_window, heads and pfa_repeats must be >= 1")
        for c in self.channels:
            if c % self.heads:
                raise ConfigError(f"{c} channels not divisible by {self.heads} heads")
        if self.time_dim % 2:
            raise ConfigError(f"time_dim must be even, got {self.time_dim}")
        if not self.residual_scale > 0:
            raise ConfigError(f"residual_scale must be positive, got {self.residual_scale}")
        if self.prediction not in PREDICTIONS:
            raise ConfigError(f"prediction must be one of {PREDICTIONS}, got {self.prediction!r}")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**j for j in range(self.levels)]

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


class GuidancePyramid(NamedTuple):
    levels: list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]


def timestep_embed(t, dim: int) -> torch.Tensor:
    """Interleaved sinusoid ``[sin(t f0), cos(t f0), sin(t f1), ...]``.

    ``f_i = 10000 ** (-i / (dim / 2))``. Returns ``(B, dim)`` for a tensor of
    timesteps or ``(dim,)`` for a scalar.
    """
    if dim < 2 or dim % 2:
        raise ConfigError(f"embedding dim must be even and positive, got {dim}")
    scalar = not isinstance(t, torch.Tensor) or t.dim() == 0
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1, 1)
    freqs = torch.exp(-math.log(10000.0) * torch.arange(dim // 2, dtype=torch.float64) / (dim // 2))
    phase = t * freqs
    emb = torch.stack([phase.sin(), phase.cos()], dim=-1).reshape(t.shape[0], dim)
    return emb[0] if scalar else emb


def loss_he(target: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Root-mean-square error plus mean absolute error."""
    if target.shape != recon.shape:
        raise DimensionError(f"loss_he: shapes {tuple(target.shape)} and {tuple(recon.shape)} differ")
    diff = target - recon
    return diff.pow(2).mean().sqrt() + diff.abs().mean()


def to_tokens(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)


def to_map(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, _, c = tokens.shape
    return tokens.transpose(1, 2).reshape(b, c, h, w)


def _fit_window(h: int, w: int, window: int) -> int:
    g = math.gcd(h, w)
    return max(d for d in range(1, min(window, g) + 1) if g % d == 0)


class SwinLayer(nn.Module):
    """Window self-attention with relative position bias, then an MLP.

    The window shrinks to the largest divisor of the feature size that is
    at most ``window``; shifting is skipped when one window covers the map.
    """

    def __init__(self, dim: int, heads: int, window: int, shifted: bool, mlp_ratio: float = 2.0):
        super().__init__()
        self.heads = heads
        self.window = window
        self.shifted = shifted
        self.scale = (dim // heads) ** -0.5
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        nn.init.trunc_normal_(self.bias_table, std=0.02)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def _rel_index(self, ws: int, device) -> torch.Tensor:
        coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :] + (self.window - 1)
        return (rel[0] * (2 * self.window - 1) + rel[1]).to(device)

    def _shift_mask(self, h: int, w: int, ws: int, shift: int, device) -> torch.Tensor:
        region = torch.zeros(h, w, device=device)
        cuts = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
        label = 0
        for hs in cuts:
            for wsl in cuts:
                region[hs, wsl] = label
                label += 1
        win = region.reshape(h // ws, ws, w // ws, ws).transpose(1, 2).reshape(-1, ws * ws)
        return (win[:, :, None] != win[:, None, :])

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, n, c = x.shape
        ws = _fit_window(h, w, self.window)
        shift = ws // 2 if self.shifted and ws < max(h, w) and ws > 1 else 0

        y = self.norm1(x).reshape(b, h, w, c)
        if shift:
            y = torch.roll(y, (-shift, -shift), dims=(1, 2))
        y = y.reshape(b, h // ws, ws, w // ws, ws, c).transpose(2, 3).reshape(-1, ws * ws, c)
        nw = (h // ws) * (w // ws)
        qkv = self.qkv(y).reshape(y.shape[0], ws * ws, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(-1, -2)) * self.scale
        bias = self.bias_table[self._rel_index(ws, x.device)].permute(2, 0, 1)
        scores = scores + bias.to(scores.dtype)
        if shift:
            mask = self._shift_mask(h, w, ws, shift, x.device)
            scores = scores.reshape(b, nw, self.heads, ws * ws, ws * ws)
            scores = scores.masked_fill(mask[None, :, None], float("-inf"))
            scores = scores.reshape(-1, self.heads, ws * ws, ws * ws)
        y = (scores.softmax(-1) @ v).transpose(1, 2).reshape(-1, ws * ws, c)
        y = self.proj(y)
        y = y.reshape(b, h // ws, w // ws, ws, ws, c).transpose(2, 3).reshape(b, h, w, c)
        if shift:
            y = torch.roll(y, (shift, shift), dims=(1, 2))
        x = x + y.reshape(b, n, c)
        return x + self.mlp(self.norm2(x))


class HaarSampler(nn.Module):
    def down(self, x: torch.Tensor) -> SubbandSet:
        return dwt2_haar(x)

    def up(self, s: SubbandSet) -> torch.Tensor:
        return idwt2_haar(s)


class ConvSampler(nn.Module):
    """Learned stride-2 analysis/synthesis pair standing in for the Haar transform."""

    def __init__(self, channels: int):
        super().__init__()
        self.analysis = nn.Conv2d(channels, 4 * channels, 2, stride=2)
        self.synthesis = nn.ConvTranspose2d(4 * channels, channels, 2, stride=2)

    def down(self, x: torch.Tensor) -> SubbandSet:
        return SubbandSet(*self.analysis(x).chunk(4, dim=1))

    def up(self, s: SubbandSet) -> torch.Tensor:
        return self.synthesis(torch.cat(tuple(s), dim=1))


SAMPLING_MODES = ("dwt", "strided-conv")


def _conv(cin: int, cout: int, k: int = 3) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, padding=k // 2)


def _check_size(x: torch.Tensor, levels: int) -> None:
    h, w = x.shape[-2:]
    if h % 2**levels or w % 2**levels:
        raise DimensionError(f"spatial size {h}x{w} is not divisible by 2**{levels}")


class HENet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.channels
        self.levels = cfg.levels
        self.entry = _conv(cfg.in_channels, ch[0])
        self.down_adjust = nn.ModuleList(_conv(ch[j], ch[j + 1]) for j in range(cfg.levels - 1))
        self.bottleneck = nn.Conv2d(ch[-1], ch[-1], 1)
        self.up_adjust = nn.ModuleList(_conv(ch[j + 1], ch[j]) for j in range(cfg.levels - 1))
        self.exit = _conv(ch[0], cfg.in_channels)
        self.samplers = nn.ModuleList(HaarSampler() for _ in range(cfg.levels))

    def forward(self, presr: torch.Tensor) -> tuple[torch.Tensor, GuidancePyramid]:
        _check_size(presr, self.levels)
        x = self.entry(presr)
        highs = []
        for j in range(self.levels):
            bands = self.samplers[j].down(x)
            highs.append(bands.highs)
            x = bands.ll
            if j < self.levels - 1:
                x = self.down_adjust[j](x)
        x = self.bottleneck(x)
        for j in reversed(range(self.levels)):
            if j < self.levels - 1:
                x = self.up_adjust[j](x)
            x = self.samplers[j].up(SubbandSet(x, *highs[j]))
        return self.exit(x), GuidancePyramid(highs)

    @torch.no_grad()
    def reset_to_identity(self) -> None:
        """Bias-free pass-through weights: zero-padded channels in, first channels out."""

        def embed(conv: nn.Conv2d) -> None:
            conv.weight.zero_()
            k = conv.weight.shape[-1] // 2
            for i in range(min(conv.in_channels, conv.out_channels)):
                conv.weight[i, i, k, k] = 1.0
            conv.bias.zero_()

        for conv in [self.entry, self.bottleneck, self.exit, *self.down_adjust, *self.up_adjust]:
            embed(conv)


class EncoderStage(nn.Module):
    def __init__(self, dim: int, cfg: ModelConfig, repeats: int):
        super().__init__()
        self.swin = nn.ModuleList(
            SwinLayer(dim, cfg.heads, cfg.swin_window, shifted=i % 2 == 1, mlp_ratio=cfg.mlp_ratio)
            for i in range(cfg.encoder_swin)
        )
        self.dfa = nn.ModuleList(DFABlock(dim, cfg.heads, cfg.mlp_ratio) for _ in range(repeats))

    def forward(self, ll: torch.Tensor, guide: torch.Tensor | None) -> torch.Tensor:
        h, w = ll.shape[-2:]
        x = to_tokens(ll)
        for layer in self.swin:
            x = layer(x, h, w)
        x, _ = run_stack(self.dfa, x, guide)
        return to_map(x, h, w)


class DecoderStage(nn.Module):
    """``n`` Swin layers, then an MLP block that adds the timestep embedding."""

    def __init__(self, dim: int, cfg: ModelConfig, repeats: int):
        super().__init__()
        self.swin = nn.ModuleList(
            SwinLayer(dim, cfg.heads, cfg.swin_window, shifted=i % 2 == 1, mlp_ratio=cfg.mlp_ratio)
            for i in range(repeats)
        )
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, dim))
        hidden = int(dim * cfg.mlp_ratio)
        self.norm = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        tokens = to_tokens(x)
        for layer in self.swin:
            tokens = layer(tokens, h, w)
        tokens = tokens + self.time_mlp(temb).unsqueeze(1)
        tokens = tokens + self.mlp(self.norm(tokens))
        return to_map(tokens, h, w)


GUIDANCE_MODES = ("he-net", "ha-net-self", "none")


class HANet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.channels
        self.levels = cfg.levels
        self.time_dim = cfg.time_dim
        self.entry = _conv(cfg.in_channels, ch[0])
        self.encoders = nn.ModuleList(EncoderStage(ch[j], cfg, cfg.dfa_repeats[j]) for j in range(cfg.levels))
        self.enc_adjust = nn.ModuleList(_conv(ch[j], ch[j + 1]) for j in range(cfg.levels - 1))
        self.pfa = nn.ModuleList(DFABlock(ch[-1], cfg.heads, cfg.mlp_ratio) for _ in range(cfg.pfa_repeats))
        self.dec_adjust = nn.ModuleList(_conv(ch[j + 1], ch[j]) for j in range(cfg.levels - 1))
        self.decoders = nn.ModuleList(DecoderStage(ch[j], cfg, cfg.decoder_repeats[j]) for j in range(cfg.levels))
        self.exit = _conv(ch[0], cfg.in_channels)
        self.samplers = nn.ModuleList(HaarSampler() for _ in range(cfg.levels))
        self.guidance_mode = "he-net"
        self.self_only = False

    def forward(self, x_t: torch.Tensor, t, guidance: GuidancePyramid | None) -> torch.Tensor:
        _check_size(x_t, self.levels)
        if self.guidance_mode == "he-net" and not self.self_only:
            if guidance is None or len(guidance.levels) != self.levels:
                raise DimensionError(f"guidance must provide {self.levels} levels")
        b = x_t.shape[0]
        t = torch.as_tensor(t).reshape(-1).expand(b)
        temb = timestep_embed(t, self.time_dim).to(x_t.dtype)

        x = self.entry(x_t)
        highs = []
        for j in range(self.levels):
            bands = self.samplers[j].down(x)
            highs.append(bands.highs)
            x = self.encoders[j](bands.ll, self._guide(j, bands, guidance))
            if j < self.levels - 1:
                x = self.enc_adjust[j](x)
        h, w = x.shape[-2:]
        tokens, _ = run_stack(self.pfa, to_tokens(x))
        x = to_map(tokens, h, w)
        for j in reversed(range(self.levels)):
            if j < self.levels - 1:
                x = self.dec_adjust[j](x)
            x = self.samplers[j].up(SubbandSet(x, *highs[j]))
            x = self.decoders[j](x, temb)
        return self.exit(x)

    def _guide(self, j: int, bands: SubbandSet, guidance: GuidancePyramid | None):
        if self.self_only or self.guidance_mode == "none":
            return None
        if self.guidance_mode == "ha-net-self":
            triplet = bands.highs
        else:
            triplet = guidance.levels[j]
            if triplet[0].shape != bands.ll.shape:
                raise DimensionError(
                    f"guidance level {j} has shape {tuple(triplet[0].shape)}, "
                    f"features have {tuple(bands.ll.shape)}"
                )
        # detail bands are stacked along the token axis, M = 3N
        return torch.cat([to_tokens(band) for band in triplet], dim=1)


class HDWNet(nn.Module):
    """HE-Net plus HA-Net, with the noise schedule and ablation switches.

    ``sampling='strided-conv'`` swaps every Haar sampler for a learned
    :class:`ConvSampler`. Those extra parameters are created after the
    shared ones so that switching ablation axes leaves shared
    initialisation unchanged for a given seed.
    """

    def __init__(self, cfg: ModelConfig, sampling: str = "dwt", attention: str = "dtb",
                 topk: int | None = None, guidance: str = "he-net"):
        super().__init__()
        self.cfg = cfg
        self.he_net = HENet(cfg)
        self.ha_net = HANet(cfg)
        if sampling not in SAMPLING_MODES:
            raise ConfigError(f"unknown sampling {sampling!r}; expected one of {SAMPLING_MODES}")
        self.sampling = sampling
        if sampling == "strided-conv":
            for net in (self.he_net, self.ha_net):
                net.samplers = nn.ModuleList(ConvSampler(c) for c in cfg.channels)
        self.schedule = cfg.schedule()
        for name, module in self.named_modules():
            if isinstance(module, DFABlock):
                module.ledger_name = name
        self.set_ablation(attention=attention, topk=topk, guidance=guidance)

    def set_ablation(self, attention: str = "dtb", topk: int | None = None, guidance: str = "he-net") -> None:
        """Switch attention masking and guidance routing; weights are untouched."""
        if attention not in (*ATTENTION_MODES, "self-only"):
            raise ConfigError(f"unknown attention mode {attention!r}")
        if guidance not in GUIDANCE_MODES:
            raise ConfigError(f"unknown guidance {guidance!r}; expected one of {GUIDANCE_MODES}")
        self.attention, self.topk, self.guidance_mode = attention, topk, guidance
        for module in self.modules():
            if isinstance(module, DFABlock):
                module.mode = "dense" if attention == "self-only" else attention
                module.topk = topk
        self.ha_net.self_only = attention == "self-only"
        self.ha_net.guidance_mode = guidance

    def guidance(self, presr: torch.Tensor) -> tuple[torch.Tensor, GuidancePyramid]:
        return self.he_net(presr)

    def predict_noise(self, x_t, t, guidance: GuidancePyramid | None) -> torch.Tensor:
        out = self.ha_net(x_t, t, guidance)
        if self.cfg.prediction == "eps":
            return out
        ab = self.schedule._at(self.schedule.alpha_bars, t, x_t)
        if self.cfg.prediction == "x0":
            return (x_t - ab.sqrt() * out) / (1 - ab).sqrt()
        return (1 - ab).sqrt() * x_t + ab.sqrt() * out

    def losses(self, presr: torch.Tensor, x0: torch.Tensor, t, eps: torch.Tensor) -> LossTerms:
        recon, guide = self.he_net(presr)
        x_t = q_sample(x0 * self.cfg.residual_scale, t, eps, self.schedule)
        eps_pred = self.predict_noise(x_t, t, guide)
        return loss_total(loss_he(presr, recon), loss_ha(eps, eps_pred), self.cfg.beta_weight)

    def layer_counts(self) -> dict[str, list[int] | int]:
        """Constructed layer counts per stage, read back from the module tree."""
        return {
            "dfa_repeats": [len(stage.dfa) for stage in self.ha_net.encoders],
            "decoder_repeats": [len(stage.swin) for stage in self.ha_net.decoders],
            "encoder_swin": [len(stage.swin) for stage in self.ha_net.encoders],
            "pfa_repeats": len(self.ha_net.pfa),
            "levels": len(self.he_net.samplers),
        }

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())
