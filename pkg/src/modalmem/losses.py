"""OHEM cross-entropy and the combined training objective."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import IGNORE_INDEX


@dataclass
class LossConfig:
    alpha: float = 1.0
    ohem_threshold: float = 0.7
    ohem_min_kept: float = 1.0 / 16

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.ohem_threshold <= 1:
            raise ValueError("ohem_threshold must lie in (0, 1]")
        if not 0 < self.ohem_min_kept <= 1:
            raise ValueError("ohem_min_kept must lie in (0, 1]")


def ohem_ce(gt: torch.Tensor, logits: torch.Tensor, cfg: LossConfig | None = None,
            return_kept: bool = False):
    """Mean cross-entropy over the hard pixels.

    ``gt`` is (H, W) or (B, H, W); ``logits`` (c, H, W) or (B, c, H, W).
    A valid pixel is hard when its true-class probability is below the
    threshold. If fewer than ``min_kept`` x valid pixels are hard, the
    lowest-probability pixels are added; every pixel tied with the cutoff is
    kept.
    """
    cfg = cfg or LossConfig()
    if logits.dim() == 3:
        logits, gt = logits[None], gt[None]
    if logits.shape[0] != gt.shape[0] or logits.shape[2:] != gt.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(gt.shape)} disagree")
    c = logits.shape[1]
    gt = gt.long()
    valid = gt != IGNORE_INDEX
    bad = valid & ((gt < 0) | (gt >= c))
    if bool(bad.any()):
        raise ValueError(f"label values outside 0..{c - 1} and {IGNORE_INDEX}: {gt[bad].unique().tolist()}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        zero = logits.sum() * 0.0
        return (zero, 0) if return_kept else zero

    logp = F.log_softmax(logits, dim=1).permute(0, 2, 3, 1)[valid]   # (N, c)
    target = gt[valid]
    nll = -logp.gather(1, target[:, None])[:, 0]
    prob = (-nll).detach().exp()

    kept = prob < cfg.ohem_threshold
    n_min = min(n_valid, max(1, math.floor(cfg.ohem_min_kept * n_valid)))
    if int(kept.sum()) < n_min:
        cutoff = torch.kthvalue(prob, n_min).values
        kept = kept | (prob <= cutoff)
    loss = nll[kept].mean()
    return (loss, int(kept.sum())) if return_kept else loss


@dataclass
class LossTerms:
    total: torch.Tensor
    proto: torch.Tensor
    ohem: torch.Tensor


def total_loss(gt, fused_logits, proto, cfg: LossConfig | None = None) -> LossTerms:
    """alpha * proto + OHEM(gt, fused_logits); both addends kept for logging."""
    cfg = cfg or LossConfig()
    proto = torch.as_tensor(proto, dtype=fused_logits.dtype)
    if float(proto.detach()) < 0:
        raise ValueError("prototype loss must be non-negative")
    ohem = ohem_ce(gt, fused_logits, cfg)
    total = ohem if cfg.alpha == 0 else cfg.alpha * proto + ohem
    return LossTerms(total, proto, ohem)
