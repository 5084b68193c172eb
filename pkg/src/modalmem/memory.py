"""Memory mechanism over a sequence of modalities.

Frames are processed in modality order. Frame 1 is decoded straight from its
encoder features; every later frame first cross-attends to the banked
memories of all earlier frames. Each frame except the last writes one memory
entry built from its own mask logits and features. The final prediction is
the mean of all per-frame logits (memory residual connection).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import ChannelNorm, Encoder, EncoderOutput
from .numerics import scaled_dot_attention, sinusoidal_positions


@dataclass
class MemoryEntry:
    v_fea: torch.Tensor  # (B, C_mem, h, w)
    v_pos: torch.Tensor  # (C_mem, h, w)


class MemoryBank:
    """Ordered per-frame memories; logs which entries each frame reads."""

    def __init__(self):
        self.entries: list[MemoryEntry] = []
        self.reads: list[tuple[int, tuple[int, ...]]] = []

    def __len__(self):
        return len(self.entries)

    def append(self, entry: MemoryEntry):
        self.entries.append(entry)


def build_memory_context(bank: MemoryBank, i: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Concatenate entries 1..i-1 (1-based frame index) along the token axis.

    Returns ``v_pf`` of shape (B, (i-1)*h*w, C_mem) and ``v_pp`` of shape
    ((i-1)*h*w, C_mem).
    """
    if i < 2:
        raise ValueError("frame 1 has no memory context")
    if len(bank) != i - 1:
        raise ValueError(f"frame {i} expects {i - 1} banked entries, bank holds {len(bank)}")
    bank.reads.append((i, tuple(range(1, i))))
    v_pf = torch.cat([e.v_fea.flatten(2).transpose(1, 2) for e in bank.entries], dim=1)
    v_pp = torch.cat([e.v_pos.flatten(1).transpose(0, 1) for e in bank.entries], dim=0)
    return v_pf, v_pp


class MemoryEncoder(nn.Module):
    """Fuses a frame's class probabilities with its features into one memory entry."""

    def __init__(self, num_classes: int, c_e: int, c_mem: int = 16):
        super().__init__()
        self.c_mem = c_mem
        self.mask_proj = nn.Conv2d(num_classes, c_mem, 1)
        self.feat_proj = nn.Conv2d(c_e, c_mem, 1)
        self.fuse = nn.Conv2d(c_mem, c_mem, 1)

    def forward(self, logits: torch.Tensor, f_e: torch.Tensor, frame_index: int) -> MemoryEntry:
        h, w = f_e.shape[-2:]
        H, W = logits.shape[-2:]
        if H % h or W % w or H // h != W // w:
            raise ValueError(f"logits {H}x{W} do not tile features {h}x{w}")
        mask = F.avg_pool2d(logits.softmax(dim=1), H // h)
        v_fea = self.fuse(F.gelu(self.mask_proj(mask) + self.feat_proj(f_e)))
        return MemoryEntry(v_fea, memory_positions(frame_index, h, w, self.c_mem, v_fea.dtype))


def memory_positions(frame_index: int, h: int, w: int, c: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal grid positions, phase-shifted so each frame's tokens get unique positions."""
    pos = sinusoidal_positions(h * w, c, offset=(frame_index - 1) * h * w, dtype=dtype)
    return pos.transpose(0, 1).reshape(c, h, w)


class MemoryAttention(nn.Module):
    """Cross-attention from current tokens to banked memory, then a token FFN.

    ``out`` and ``ffn_out`` are the two residual output projections.
    """

    def __init__(self, c_e: int, c_mem: int = 16, hidden: int = 128):
        super().__init__()
        self.c_e = c_e
        self.norm_q = ChannelNorm(c_e)
        self.q = nn.Linear(c_e, c_e)
        self.k = nn.Linear(c_mem, c_e)
        self.v = nn.Linear(c_mem, c_e)
        self.out = nn.Linear(c_e, c_e)
        self.norm_ffn = nn.LayerNorm(c_e)
        self.ffn_in = nn.Linear(c_e, hidden)
        self.ffn_out = nn.Linear(hidden, c_e)

    def zero_output_projections(self):
        with torch.no_grad():
            for lin in (self.out, self.ffn_out):
                lin.weight.zero_()
                lin.bias.zero_()

    def forward(self, f_e: torch.Tensor, v_pf: torch.Tensor, v_pp: torch.Tensor) -> torch.Tensor:
        if v_pf.shape[1] == 0:
            raise ValueError("memory attention needs a non-empty memory")
        if v_pf.shape[1] != v_pp.shape[0]:
            raise ValueError("memory features and positions disagree in token count")
        B, C, h, w = f_e.shape
        pos = sinusoidal_positions(h * w, C, dtype=f_e.dtype)
        tokens = f_e.flatten(2).transpose(1, 2)
        qn = self.norm_q(f_e).flatten(2).transpose(1, 2)
        att = scaled_dot_attention(self.q(qn + pos), self.k(v_pf + v_pp), self.v(v_pf))
        x = tokens + self.out(att)
        x = x + self.ffn_out(F.gelu(self.ffn_in(self.norm_ffn(x))))
        return x.transpose(1, 2).reshape(B, C, h, w)


def memory_attention(f_e, v_pf, v_pp, params: MemoryAttention):
    return params(f_e, v_pf, v_pp)


class MaskDecoder(nn.Module):
    """Two-step top-down decoder: H/16 -> H/8 -> H/4, class head, x4 upsample."""

    def __init__(self, c_e: int, c_high1: int, c_high2: int, num_classes: int, width: int = 32):
        super().__init__()
        self.inp = nn.Conv2d(c_e, width, 1)
        self.high2 = nn.Conv2d(c_high2, width, 1)
        self.mid = nn.Conv2d(width, width, 3, padding=1)
        self.high1 = nn.Conv2d(c_high1, width, 1)
        self.fine = nn.Conv2d(width, width, 3, padding=1)
        self.head = nn.Conv2d(width, num_classes, 1)

    def forward(self, f_c, f_high1, f_high2):
        if f_high2.shape[-2:] != tuple(2 * s for s in f_c.shape[-2:]) or \
                f_high1.shape[-2:] != tuple(2 * s for s in f_high2.shape[-2:]):
            raise ValueError(f"inconsistent pyramid {tuple(f_c.shape)}, {tuple(f_high2.shape)}, "
                             f"{tuple(f_high1.shape)}")
        x = F.interpolate(self.inp(f_c), scale_factor=2, mode="nearest") + self.high2(f_high2)
        x = F.gelu(self.mid(F.gelu(x)))
        x = F.interpolate(x, scale_factor=2, mode="nearest") + self.high1(f_high1)
        x = F.gelu(self.fine(F.gelu(x)))
        return F.interpolate(self.head(x), scale_factor=4, mode="bilinear", align_corners=False)


def decode_mask(f_c, f_high1, f_high2, params: MaskDecoder):
    return params(f_c, f_high1, f_high2)


def average_masks(per_modality_logits) -> torch.Tensor:
    if len(per_modality_logits) == 0:
        raise ValueError("nothing to average")
    shape = per_modality_logits[0].shape
    if any(m.shape != shape for m in per_modality_logits):
        raise ValueError("mask shapes disagree")
    return torch.stack(list(per_modality_logits)).mean(dim=0)


@dataclass
class SequenceOutput:
    per_modality_logits: list[torch.Tensor]
    fused_logits: torch.Tensor
    pre_memory_features: list[torch.Tensor] = field(default_factory=list)
    # features for frames 2..M (frame 1 never passes memory attention)
    post_memory_features: list[torch.Tensor] = field(default_factory=list)
    f_high1: list[torch.Tensor] = field(default_factory=list)
    bank: MemoryBank | None = None


class MemorySegmenter(nn.Module):
    """Encoder + memory encoder + memory attention + mask decoder (+ training-only prototype projection)."""

    def __init__(self, in_ch=1, num_classes=4, widths=(16, 32, 64, 64), window=4, lora_rank=4,
                 c_e=64, c_high1=32, c_high2=32, c_mem=16, decoder_width=32, proto_dim=32,
                 spmm=True, spmm_reuse_projection=False):
        super().__init__()
        self.num_classes = num_classes
        self.encoder = Encoder(in_ch, widths, window, lora_rank, c_e, c_high1, c_high2)
        self.memory_encoder = MemoryEncoder(num_classes, c_e, c_mem)
        self.memory_attention = MemoryAttention(c_e, c_mem)
        self.decoder = MaskDecoder(c_e, c_high1, c_high2, num_classes, decoder_width)
        self.proto_dim = proto_dim
        self.spmm_reuse_projection = spmm_reuse_projection
        if spmm and spmm_reuse_projection:
            if decoder_width != proto_dim:
                raise ValueError("projection reuse needs decoder_width == proto_dim")
            self.proto_proj = None
        elif spmm:
            self.proto_proj = nn.Conv2d(c_high1, proto_dim, 1)
        else:
            self.proto_proj = None
        self.spmm = spmm

    def prototype_projection(self) -> nn.Conv2d:
        if not self.spmm:
            raise RuntimeError("prototype projection requested with SPMM disabled")
        return self.decoder.high1 if self.proto_proj is None else self.proto_proj

    def encode_frames(self, frames: torch.Tensor) -> list[EncoderOutput]:
        B, M = frames.shape[:2]
        out = self.encoder(frames.reshape(B * M, *frames.shape[2:]))
        split = lambda t: list(t.reshape(B, M, *t.shape[1:]).unbind(1))  # noqa: E731
        return [EncoderOutput(a, b, c) for a, b, c in zip(split(out.f_e), split(out.f_high1), split(out.f_high2))]

    def forward(self, frames, memory=True, residual=True) -> SequenceOutput:
        return run_sequence(self, frames, memory=memory, residual=residual)


def run_sequence(model: MemorySegmenter, frames: torch.Tensor, memory: bool = True,
                 residual: bool = True) -> SequenceOutput:
    """Run a (B, M, C, H, W) batch of modality sequences (or a single (M, C, H, W) sequence)."""
    if frames.dim() == 4:
        frames = frames[None]
    M = frames.shape[1]
    if M < 1:
        raise ValueError("empty modality sequence")
    enc = model.encode_frames(frames)
    bank = MemoryBank()
    logits, pre, post = [], [], []
    for i, e in enumerate(enc, start=1):
        pre.append(e.f_e)
        f_c = e.f_e
        if memory and i > 1:
            v_pf, v_pp = build_memory_context(bank, i)
            f_c = model.memory_attention(e.f_e, v_pf, v_pp)
            post.append(f_c)
        lg = model.decoder(f_c, e.f_high1, e.f_high2)
        logits.append(lg)
        if memory and i < M:
            bank.append(model.memory_encoder(lg, e.f_e, i))
    fused = average_masks(logits) if residual else logits[-1]
    return SequenceOutput(logits, fused, pre, post, [e.f_high1 for e in enc], bank)
