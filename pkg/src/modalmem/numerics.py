"""Small numeric primitives shared by the encoder, memory and loss code.

Everything operates on ``torch.Tensor``; gradients come from autograd and are
audited against central differences by :func:`finite_diff_check`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch


class NonFiniteError(FloatingPointError):
    """Raised when a tensor that must be finite contains NaN or Inf."""


def assert_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return t


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two dims.

    Leading dims are treated as batch dims and must agree.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key width mismatch: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value count mismatch: {k.shape[-2]} vs {v.shape[-2]}")
    if k.shape[-2] == 0:
        raise ValueError("attention needs at least one key")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    scores = scores - scores.amax(dim=-1, keepdim=True)
    w = scores.exp()
    w = w / w.sum(dim=-1, keepdim=True)
    return w @ v


def sinusoidal_positions(n: int, d: int, offset: float = 0.0,
                         dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(n, d) table; row t holds sin/cos pairs of (t + offset) / 10000^(2k/d)."""
    if d % 2:
        raise ValueError(f"channel count must be even, got {d}")
    if n < 1:
        raise ValueError("need at least one position")
    t = torch.arange(n, dtype=torch.float64).unsqueeze(1) + offset
    freq = 10000.0 ** (torch.arange(0, d, 2, dtype=torch.float64) / d)
    out = torch.empty(n, d, dtype=torch.float64)
    out[:, 0::2] = torch.sin(t / freq)
    out[:, 1::2] = torch.cos(t / freq)
    return out.to(dtype)


@dataclass
class GradReport:
    max_relative_error: float
    per_parameter_errors: dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_relative_error < tol


def finite_diff_check(f: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor],
                      epsilon: float = 1e-5) -> GradReport:
    """Compare autograd gradients of scalar ``f()`` with central differences.

    ``params`` are leaf tensors that ``f`` closes over; they are perturbed in
    place and restored. Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    tensors = dict(params)
    for p in tensors.values():
        p.requires_grad_(True)
        p.grad = None
    out = f()
    assert_finite(out.detach(), "objective")
    analytic = torch.autograd.grad(out, list(tensors.values()), allow_unused=True)

    errors: dict[str, float] = {}
    with torch.no_grad():
        for (name, p), a in zip(tensors.items(), analytic):
            a = torch.zeros_like(p) if a is None else a
            flat = p.view(-1)
            num = torch.empty_like(flat)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + epsilon
                fp = f().item()
                flat[j] = orig - epsilon
                fm = f().item()
                flat[j] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteError(f"objective non-finite while perturbing {name}[{j}]")
                num[j] = (fp - fm) / (2 * epsilon)
            a = a.reshape(-1).to(num.dtype)
            denom = torch.maximum(torch.maximum(a.abs(), num.abs()), torch.full_like(a, 1e-8))
            errors[name] = float(((a - num).abs() / denom).max()) if flat.numel() else 0.0
    return GradReport(max(errors.values(), default=0.0), errors)
