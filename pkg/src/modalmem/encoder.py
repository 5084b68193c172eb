"""Toy hierarchical encoder: four halving stages, windowed attention, FPN neck.

Stage i (1-based) runs at H / 2**(i+1). Stages 3 and 4 are fused top-down
into ``f_e`` (H/16); stages 1 and 2 feed 1x1 taps ``f_high1`` (H/4) and
``f_high2`` (H/8) for the mask decoder.

Projection matrices use the row-vector convention ``y = x @ W`` so a LoRA
delta ``W_a @ W_b`` (d x r times r x d) adds directly to ``W``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import scaled_dot_attention


@dataclass
class EncoderOutput:
    f_e: torch.Tensor
    f_high1: torch.Tensor
    f_high2: torch.Tensor


def _trunc_normal(*shape, std=0.02):
    w = torch.empty(*shape)
    nn.init.trunc_normal_(w, std=std, a=-2 * std, b=2 * std)
    return w


class LoraWeights(nn.Module):
    """Low-rank deltas for one attention block's query and value projections."""

    def __init__(self, d_q: int, d_v: int, rank: int = 4):
        super().__init__()
        if rank < 1 or rank > d_q // 4 or rank > d_v // 4:
            raise ValueError(f"LoRA rank {rank} violates r <= d/4 for d_q={d_q}, d_v={d_v}")
        self.rank = rank
        self.w_a_q = nn.Parameter(_trunc_normal(d_q, rank))
        self.w_b_q = nn.Parameter(torch.zeros(rank, d_q))
        self.w_a_v = nn.Parameter(_trunc_normal(d_v, rank))
        self.w_b_v = nn.Parameter(torch.zeros(rank, d_v))

    def delta_q(self) -> torch.Tensor:
        return self.w_a_q @ self.w_b_q

    def delta_v(self) -> torch.Tensor:
        return self.w_a_v @ self.w_b_v

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def lora_apply(q: torch.Tensor, v: torch.Tensor, lw: LoraWeights | None) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(q + W_a^Q W_b^Q, v + W_a^V W_b^V)``; inputs pass through untouched if ``lw`` is None."""
    if lw is None:
        return q, v
    if q.shape != (lw.w_a_q.shape[0], lw.w_b_q.shape[1]):
        raise ValueError(f"query weight {tuple(q.shape)} does not match LoRA dims")
    if v.shape != (lw.w_a_v.shape[0], lw.w_b_v.shape[1]):
        raise ValueError(f"value weight {tuple(v.shape)} does not match LoRA dims")
    return q + lw.delta_q(), v + lw.delta_v()


def channel_layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-6):
    """LayerNorm over dim 1 of an NCHW tensor."""
    mu = x.mean(dim=1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * weight[:, None, None] + bias[:, None, None]


class ChannelNorm(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(c))
        self.bias = nn.Parameter(torch.zeros(c))

    def forward(self, x):
        return channel_layer_norm(x, self.weight, self.bias)


def window_partition(x: torch.Tensor, win: int) -> torch.Tensor:
    B, C, H, W = x.shape
    x = x.view(B, C, H // win, win, W // win, win)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(-1, win * win, C)


def window_merge(t: torch.Tensor, win: int, B: int, H: int, W: int) -> torch.Tensor:
    C = t.shape[-1]
    x = t.view(B, H // win, W // win, win, win, C)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(B, C, H, W)


class WindowAttention(nn.Module):
    """Pre-norm windowed self-attention with residual; Q and V may carry LoRA."""

    def __init__(self, dim: int, window: int, heads: int, rank: int | None):
        super().__init__()
        self.dim, self.window, self.heads = dim, window, heads
        self.norm = ChannelNorm(dim)
        self.w_q = nn.Parameter(_trunc_normal(dim, dim))
        self.w_k = nn.Parameter(_trunc_normal(dim, dim))
        self.w_v = nn.Parameter(_trunc_normal(dim, dim))
        self.b_qkv = nn.Parameter(torch.zeros(3, dim))
        self.out = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.out.weight, std=0.02)
        nn.init.zeros_(self.out.bias)
        self.lora = LoraWeights(dim, dim, rank) if rank else None

    def forward(self, x):
        B, C, H, W = x.shape
        # largest window <= the nominal size that tiles the map
        win = next(k for k in range(min(self.window, H, W), 0, -1) if H % k == 0 and W % k == 0)
        t = window_partition(self.norm(x), win)
        wq, wv = lora_apply(self.w_q, self.w_v, self.lora)
        q = t @ wq + self.b_qkv[0]
        k = t @ self.w_k + self.b_qkv[1]
        v = t @ wv + self.b_qkv[2]
        n, L, _ = t.shape
        hd = C // self.heads
        q, k, v = (z.view(n, L, self.heads, hd).transpose(1, 2) for z in (q, k, v))
        a = scaled_dot_attention(q, k, v).transpose(1, 2).reshape(n, L, C)
        return x + window_merge(self.out(a), win, B, H, W)


class ConvMlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 2):
        super().__init__()
        self.norm = ChannelNorm(dim)
        self.fc1 = nn.Conv2d(dim, dim * ratio, 1)
        self.fc2 = nn.Conv2d(dim * ratio, dim, 1)

    def forward(self, x):
        return x + self.fc2(F.gelu(self.fc1(self.norm(x))))


class Stage(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, window: int, rank: int | None):
        super().__init__()
        self.down = nn.Conv2d(c_in, c_out, stride, stride=stride)
        self.attn = WindowAttention(c_out, window, heads=max(1, c_out // 32), rank=rank)
        self.mlp = ConvMlp(c_out)

    def forward(self, x):
        return self.mlp(self.attn(self.down(x)))


class Encoder(nn.Module):
    def __init__(self, in_ch: int = 1, widths=(16, 32, 64, 64), window: int = 4, rank: int | None = 4,
                 c_e: int = 64, c_high1: int = 32, c_high2: int = 32):
        super().__init__()
        self.widths = tuple(widths)
        strides = (4, 2, 2, 2)
        chans = (in_ch,) + self.widths
        self.stages = nn.ModuleList(Stage(chans[i], chans[i + 1], strides[i], window, rank) for i in range(4))
        self.lat3 = nn.Conv2d(self.widths[2], c_e, 1)
        self.lat4 = nn.Conv2d(self.widths[3], c_e, 1)
        self.smooth = nn.Conv2d(c_e, c_e, 3, padding=1)
        self.tap1 = nn.Conv2d(self.widths[0], c_high1, 1)
        self.tap2 = nn.Conv2d(self.widths[1], c_high2, 1)
        self.c_e, self.c_high1, self.c_high2 = c_e, c_high1, c_high2

    def lora_modules(self) -> list[LoraWeights]:
        return [s.attn.lora for s in self.stages if s.attn.lora is not None]

    def backbone_parameters(self):
        lora = {id(p) for m in self.lora_modules() for p in m.parameters()}
        return [p for p in self.parameters() if id(p) not in lora]

    def forward(self, x: torch.Tensor) -> EncoderOutput:
        H, W = x.shape[-2:]
        if H % 32 or W % 32:
            raise ValueError(f"input {H}x{W} must be divisible by 32 (four halving stages below H/4)")
        feats = []
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if x.shape[-2:] != (H >> (i + 1), W >> (i + 1)):
                raise AssertionError(f"stage {i} at {tuple(x.shape[-2:])}, expected H/2^{i + 1}")
            feats.append(x)
        s1, s2, s3, s4 = feats
        top = F.interpolate(self.lat4(s4), scale_factor=2, mode="nearest")
        f_e = self.smooth(top + self.lat3(s3))
        return EncoderOutput(f_e, self.tap1(s1), self.tap2(s2))


def encode(frame: torch.Tensor, encoder: Encoder) -> EncoderOutput:
    """Encode one C x H x W frame (or a batch)."""
    single = frame.dim() == 3
    out = encoder(frame[None] if single else frame)
    if single:
        return EncoderOutput(out.f_e[0], out.f_high1[0], out.f_high2[0])
    return out
