"""Training-only semantic prototype memory.

Per-class prototypes are pooled from the modality-averaged, 32-channel
projection of the H/4 high-resolution features, masked by the downsampled
prediction. A momentum-updated global bank holds one prototype per class and
the adaptation loss pulls current prototypes towards it. Nothing here feeds
back into the forward prediction.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

PROTO_DIM = 32


@dataclass
class CurrentPrototypes:
    values: torch.Tensor   # (c, 32)
    present: torch.Tensor  # (c,) bool


class PrototypeBank:
    def __init__(self, num_classes: int, mu: float = 0.2, dim: int = PROTO_DIM,
                 dtype: torch.dtype = torch.float32):
        if not 0.0 <= mu <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {mu}")
        self.mu = float(mu)
        self.global_ = torch.zeros(num_classes, dim, dtype=dtype)
        self.seen = torch.zeros(num_classes, dtype=torch.bool)

    @property
    def num_classes(self) -> int:
        return self.global_.shape[0]

    def state_dict(self) -> dict:
        return {"global": self.global_.clone(), "seen": self.seen.clone(),
                "mu": torch.tensor(self.mu, dtype=torch.float64)}

    def load_state_dict(self, state: dict):
        self.global_ = state["global"].clone()
        self.seen = state["seen"].clone().bool()
        self.mu = float(state["mu"])

    def copy(self) -> "PrototypeBank":
        b = PrototypeBank(self.num_classes, self.mu, self.global_.shape[1], self.global_.dtype)
        b.load_state_dict(self.state_dict())
        return b


def downsample_labels(fused_logits: torch.Tensor, factor: int = 4) -> torch.Tensor:
    """Argmax over classes, then nearest-neighbour downsample by ``factor``.

    Accepts (c, H, W) or (B, c, H, W); returns integer labels at H/4 x W/4.
    """
    H, W = fused_logits.shape[-2:]
    if H % factor or W % factor:
        raise ValueError(f"{H}x{W} not divisible by {factor}")
    lab = fused_logits.detach().argmax(dim=-3)
    # nearest with an integer scale picks the top-left pixel of each cell
    return lab[..., ::factor, ::factor].contiguous()


def compute_current_prototypes(f_high1_all, mask_down: torch.Tensor, proj, num_classes: int) -> CurrentPrototypes:
    """Masked per-class mean of the modality-averaged projected features.

    ``f_high1_all``: list of M tensors (B, C1, h, w) or (C1, h, w).
    ``mask_down``: (B, h, w) or (h, w) class indices.
    ``proj``: callable mapping C1 channels to 32 (shared across modalities).
    """
    if len(f_high1_all) == 0:
        raise ValueError("need at least one modality")
    feats = [f if f.dim() == 4 else f[None] for f in f_high1_all]
    mask = mask_down if mask_down.dim() == 3 else mask_down[None]
    if any(f.shape[-2:] != mask.shape[-2:] for f in feats):
        raise ValueError("feature and mask spatial dims disagree")
    avg = torch.stack([proj(f) for f in feats]).mean(dim=0)           # (B, 32, h, w)
    onehot = F.one_hot(mask.long(), num_classes).to(avg.dtype)         # (B, h, w, c)
    sums = torch.einsum("bdhw,bhwc->cd", avg, onehot)
    counts = onehot.sum(dim=(0, 1, 2))
    present = counts > 0
    values = sums / counts.clamp(min=1).unsqueeze(1)
    return CurrentPrototypes(values, present)


def momentum_update(bank: PrototypeBank, cur: CurrentPrototypes) -> PrototypeBank:
    """In-place EMA update of the bank for present classes; returns the bank."""
    if cur.values.shape[0] != bank.num_classes:
        raise ValueError("class count mismatch between bank and current prototypes")
    with torch.no_grad():
        v = cur.values.detach().to(bank.global_.dtype)
        fresh = cur.present & ~bank.seen
        upd = cur.present & bank.seen
        g = bank.global_.clone()
        g[upd] = bank.mu * v[upd] + (1.0 - bank.mu) * g[upd]
        g[fresh] = v[fresh]
        bank.global_ = g
        bank.seen = bank.seen | cur.present
    return bank


def proto_loss(bank: PrototypeBank, cur: CurrentPrototypes, H: int, W: int,
               require_seen: bool = True) -> torch.Tensor:
    """MSE between flattened global and current prototypes of the selected classes, times (H/4)(W/4).

    Classes are selected when present in the batch and, with ``require_seen``,
    already initialised in the bank. The bank side carries no gradient.
    """
    sel = cur.present & bank.seen if require_seen else cur.present.clone()
    if not bool(sel.any()):
        return cur.values.sum() * 0.0
    g = bank.global_.detach().to(cur.values.dtype)[sel].reshape(-1)
    c = cur.values[sel].reshape(-1)
    return F.mse_loss(c, g) * (H / 4) * (W / 4)
