"""Dynamic focused attention (DFA) with Otsu-style dynamic thresholding.

Attention tensors carry arbitrary leading batch axes; the last two are the
query (N) and key (M) axes. ``index`` tensors are boolean.
"""
from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass
from fractions import Fraction

import torch
import torch.nn as nn

from . import ledger
from .errors import ConfigError, ContractError, DimensionError

NBINS = 512
# below this index density the gather kernel beats a masked dense matmul on CPU
SPARSE_DENSITY = 0.05


@dataclass
class AttentionState:
    attn: torch.Tensor  # (..., N, M) row-stochastic
    index: torch.Tensor  # (..., N, M) bool, support of attn
    layer: int = 0

    @classmethod
    def initial(cls, lead: tuple[int, ...], n: int, m: int, dtype=torch.float32, device=None):
        attn = torch.full((*lead, n, m), 1.0 / m, dtype=dtype, device=device)
        return cls(attn, torch.ones_like(attn, dtype=torch.bool), 0)


@dataclass
class ThresholdResult:
    histogram: torch.Tensor  # (..., 512) int64
    sigma_b: torch.Tensor  # (..., 512) float64, split after bin k
    k_bin: torch.Tensor  # (...) int64, -1 when degenerate
    k_star: torch.Tensor  # (...) float64 threshold value (k_bin + 1) / 512
    degenerate: torch.Tensor  # (...) bool


def _check_rows(index: torch.Tensor) -> None:
    if not bool(index.any(-1).all()):
        raise ContractError("index matrix has a query row with no allowed key")


def smm_softmax(
    q: torch.Tensor, k: torch.Tensor, index: torch.Tensor, scale: float, name: str = "smm"
) -> torch.Tensor:
    """Row softmax of ``scale * q @ k.T`` restricted to ``index``.

    Excluded positions get exactly zero weight. Two equivalent kernels are
    used: a gather over the allowed (i, j) pairs for sparse indices and a
    masked dense product otherwise. The ledger is charged ``2 * d`` per
    allowed position either way.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    n, m, d = q.shape[-2], k.shape[-2], q.shape[-1]
    index = index.bool()
    if index.shape[-2:] != (n, m):
        raise DimensionError(f"index shape {tuple(index.shape)} does not match ({n}, {m})")
    _check_rows(index)
    lead = torch.broadcast_shapes(q.shape[:-2], k.shape[:-2], index.shape[:-2])
    index = index.expand(*lead, n, m)
    nnz = int(index.sum())
    ledger.record(name, 2 * d * nnz)
    if nnz < SPARSE_DENSITY * index.numel():
        q = q.expand(*lead, n, d)
        k = k.expand(*lead, m, d)
        pos = index.nonzero(as_tuple=True)
        qi = q[(*pos[:-1],)]
        kj = k[(*pos[:-2], pos[-1])]
        vals = (qi * kj).sum(-1) * scale
        scores = torch.full((*lead, n, m), float("-inf"), dtype=vals.dtype, device=vals.device)
        scores = scores.index_put(pos, vals)
    else:
        scores = (q @ k.transpose(-1, -2)) * scale
        scores = scores.expand(*lead, n, m).masked_fill(~index, float("-inf"))
    return torch.softmax(scores, dim=-1)


def _bin_of(values: torch.Tensor) -> torch.Tensor:
    # right-closed bins (b/512, (b+1)/512], with 0 in bin 0, so "value <= k"
    # and "bin <= k_bin" select the same elements exactly
    return (torch.ceil(values * NBINS) - 1).clamp_(0, NBINS - 1).long()


def _exact_argmax(diff: list[int], n1: list[int], n2: list[int], candidates: list[int]) -> int:
    best, best_val = None, None
    for c in candidates:
        val = Fraction(diff[c] * diff[c], n1[c] * n2[c])
        if best_val is None or val > best_val:
            best, best_val = c, val
    return best


def dtb_threshold(a_oam: torch.Tensor, active: torch.Tensor | None = None) -> ThresholdResult:
    """Otsu threshold over a 512-bin histogram of the active attention values.

    One threshold per matrix (leading axes are independent matrices). Class
    means use bin centres, so between-class variance at split ``k`` is::

        sigma_b(k) = w1 * w2 * (mu1 - mu2) ** 2
                   = D**2 / (1024**2 * n**2 * n1 * n2),  D = n2*s1 - n1*s2

    with ``s`` the sums of ``2b + 1`` over each class. ``D`` is an exact
    integer; near-ties in float are re-ranked with exact rationals and the
    smallest bin wins.
    """
    vals = a_oam.detach()
    if active is None:
        active = torch.ones_like(vals, dtype=torch.bool)
    active = active.bool().expand_as(vals)
    if bool((((vals < 0) | (vals > 1)) & active).any()):
        raise ContractError("attention values must lie in [0, 1]")
    lead = vals.shape[:-2]
    batch = math.prod(lead)
    bins = torch.where(active, _bin_of(vals), torch.full_like(vals, NBINS, dtype=torch.long))
    offsets = torch.arange(batch, device=vals.device).reshape(*lead, 1, 1) * (NBINS + 1)
    hist = torch.bincount((bins + offsets).reshape(-1), minlength=batch * (NBINS + 1))
    hist = hist.reshape(batch, NBINS + 1)[:, :NBINS]

    centres = torch.arange(1, 2 * NBINS, 2, dtype=torch.long, device=vals.device)
    n1 = hist.cumsum(-1)
    s1 = (hist * centres).cumsum(-1)
    n = n1[:, -1:]
    n2 = n - n1
    s2 = s1[:, -1:] - s1
    diff = n2 * s1 - n1 * s2
    denom = (n1 * n2).to(torch.float64)
    ratio = torch.where(denom > 0, diff.to(torch.float64) ** 2 / denom.clamp(min=1), 0.0)
    sigma_b = ratio / (float(NBINS * 2) ** 2 * n.to(torch.float64).clamp(min=1) ** 2)

    peak = ratio.max(-1).values
    degenerate = peak == 0
    k_bin = ratio.argmax(-1)
    near = ratio >= (peak * (1 - 1e-9)).unsqueeze(-1)
    # an empty bin repeats the previous split exactly, so it never wins a tie
    first = torch.zeros_like(near)
    first[:, 0] = True
    near &= (hist > 0) | first
    multi = (near.sum(-1) > 1) & ~degenerate
    for b in multi.nonzero().flatten().tolist():
        cands = near[b].nonzero().flatten().tolist()
        k_bin[b] = _exact_argmax(diff[b].tolist(), n1[b].tolist(), n2[b].tolist(), cands)
    k_bin = torch.where(degenerate, torch.full_like(k_bin, -1), k_bin)
    k_star = torch.where(degenerate, 0.0, (k_bin + 1).to(torch.float64) / NBINS)
    return ThresholdResult(
        histogram=hist.reshape(*lead, NBINS),
        sigma_b=sigma_b.reshape(*lead, NBINS),
        k_bin=k_bin.reshape(lead),
        k_star=k_star.reshape(lead),
        degenerate=degenerate.reshape(lead),
    )


def threshold_mask(a_oam: torch.Tensor, thr: ThresholdResult) -> torch.Tensor:
    """MASK = a_oam > k*, or all ones for a degenerate histogram."""
    k = thr.k_star.to(a_oam.dtype)[..., None, None]
    keep = a_oam.detach() > k
    return keep | thr.degenerate[..., None, None]


def topk_mask(a_oam: torch.Tensor, k: int) -> torch.Tensor:
    """Keep the ``k`` largest entries per row; ties go to the smaller column."""
    m = a_oam.shape[-1]
    if not 1 <= k <= m:
        raise ConfigError(f"top-k needs 1 <= K <= {m}, got {k}")
    # stable descending sort keeps the earlier column first among equals
    order = torch.sort(a_oam.detach(), dim=-1, descending=True, stable=True).indices[..., :k]
    mask = torch.zeros_like(a_oam, dtype=torch.bool)
    return mask.scatter_(-1, order, True)


class MaskTape:
    """Records DFA keep-masks on the first pass and replays them afterwards.

    Used to treat mask selection as a constant, e.g. for finite-difference
    gradient checks.
    """

    def __init__(self) -> None:
        self.masks: list[torch.Tensor] = []
        self.frozen = False
        self._pos = 0
        self._token = None

    def take(self, mask: torch.Tensor) -> torch.Tensor:
        if not self.frozen:
            self.masks.append(mask)
            return mask
        mask = self.masks[self._pos]
        self._pos += 1
        return mask

    def __enter__(self) -> "MaskTape":
        self._pos = 0
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE.reset(self._token)
        self.frozen = True


_TAPE: contextvars.ContextVar[MaskTape | None] = contextvars.ContextVar("hdwsr_mask_tape", default=None)


def propagate(
    a_oam: torch.Tensor, a_prev: torch.Tensor, mask: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """A = row_norm(A_prev * (A_oam * MASK)); I = A > 0.

    A query row left empty keeps its largest ``A_oam`` entry, so every row
    stays normalisable. The mask is a constant of the backward pass.
    """
    if not (a_oam.shape == a_prev.shape == mask.shape):
        raise DimensionError(
            f"shapes differ: a_oam={tuple(a_oam.shape)} a_prev={tuple(a_prev.shape)} mask={tuple(mask.shape)}"
        )
    tape = _TAPE.get()
    if tape is not None and tape.frozen:
        keep = tape.take(None)
    else:
        support = (a_prev > 0) & (a_oam > 0)
        keep = mask.bool() & support
        empty = ~keep.any(-1, keepdim=True)
        if bool(empty.any()):
            best = torch.where(a_prev > 0, a_oam.detach(), -1.0).argmax(-1, keepdim=True)
            survivor = torch.zeros_like(keep).scatter_(-1, best, True)
            keep = torch.where(empty, survivor, keep)
        if tape is not None:
            tape.take(keep)
    prod = torch.where(keep, a_prev * a_oam, torch.zeros_like(a_oam))
    row = prod.sum(-1, keepdim=True)
    # underflowed rows fall back to uniform weight over their kept entries
    dead = row == 0
    if bool(dead.any()):
        prod = torch.where(dead & keep, torch.ones_like(prod), prod)
        row = prod.sum(-1, keepdim=True)
    attn = prod / row
    return attn, attn > 0


def mask_and_propagate(a_oam, a_prev, thr: ThresholdResult):
    return propagate(a_oam, a_prev, threshold_mask(a_oam, thr))


def attend(attn: torch.Tensor, v: torch.Tensor, index: torch.Tensor, name: str = "attend") -> torch.Tensor:
    """``attn @ v`` summed only over ``index``; ``index`` must equal ``attn > 0``."""
    index = index.bool()
    if index.shape != attn.shape:
        raise DimensionError(f"index shape {tuple(index.shape)} != attention shape {tuple(attn.shape)}")
    if v.shape[-2] != attn.shape[-1]:
        raise DimensionError(f"value rows {v.shape[-2]} != attention columns {attn.shape[-1]}")
    if not torch.equal(index, attn > 0):
        raise ContractError("index is not the support of the attention map")
    n, d = attn.shape[-2], v.shape[-1]
    nnz = int(index.sum())
    ledger.record(name, 2 * d * nnz)
    if nnz < SPARSE_DENSITY * index.numel():
        lead = attn.shape[:-2]
        v = v.expand(*lead, *v.shape[-2:])
        pos = index.nonzero(as_tuple=True)
        contrib = attn[pos].unsqueeze(-1) * v[(*pos[:-2], pos[-1])]
        out = torch.zeros(*lead, n, d, dtype=contrib.dtype, device=contrib.device)
        return out.index_put((*pos[:-1],), contrib, accumulate=True)
    return attn @ v


ATTENTION_MODES = ("dtb", "topk", "dense")


def select_mask(a_oam: torch.Tensor, index: torch.Tensor, mode: str, topk: int | None = None) -> torch.Tensor:
    if mode == "dtb":
        return threshold_mask(a_oam, dtb_threshold(a_oam, index))
    if mode == "topk":
        return topk_mask(a_oam, topk or max(1, a_oam.shape[-1] // 2))
    if mode == "dense":
        return torch.ones_like(a_oam, dtype=torch.bool)
    raise ConfigError(f"unknown attention mode {mode!r}; expected one of {ATTENTION_MODES}")


class DFABlock(nn.Module):
    """Pre-norm sparse cross-attention block followed by a feed-forward sublayer.

    Queries come from ``x``; keys and values from ``guide`` (pass ``x``
    itself for self-attention). The running :class:`AttentionState` is
    threaded through consecutive blocks.
    """

    def __init__(self, dim: int, heads: int = 1, mlp_ratio: float = 2.0):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim)
        hidden = int(dim * mlp_ratio)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.mode = "dtb"
        self.topk: int | None = None
        self.ledger_name = "dfa"

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def initial_state(self, x: torch.Tensor, guide: torch.Tensor) -> AttentionState:
        return AttentionState.initial(
            (x.shape[0], self.heads), x.shape[1], guide.shape[1], dtype=x.dtype, device=x.device
        )

    def forward(self, x: torch.Tensor, guide: torch.Tensor, state: AttentionState | None = None):
        if state is None:
            state = self.initial_state(x, guide)
        q = self._split(self.to_q(self.norm_q(x)))
        g = self.norm_kv(guide)
        k = self._split(self.to_k(g))
        v = self._split(self.to_v(g))
        a_oam = smm_softmax(q, k, state.index, self.scale, name=f"{self.ledger_name}.smm")
        mask = select_mask(a_oam, state.index, self.mode, self.topk)
        attn, index = propagate(a_oam, state.attn, mask)
        out = attend(attn, v, index, name=f"{self.ledger_name}.attend")
        b, _, n, _ = out.shape
        x = x + self.proj(out.transpose(1, 2).reshape(b, n, -1))
        x = x + self.ff(self.norm_ff(x))
        return x, AttentionState(attn, index, state.layer + 1)


def run_stack(blocks, x: torch.Tensor, guide: torch.Tensor | None = None):
    """Apply DFA blocks in sequence; ``guide=None`` means self-attention."""
    state = None
    for block in blocks:
        x, state = block(x, x if guide is None else guide, state)
    return x, state
