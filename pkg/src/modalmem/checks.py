"""Fast self-contained oracle checks behind the ``check`` command.

Each check recomputes a quantity by brute force and compares it with the
library path. The pytest suite covers the same ground more thoroughly.
"""
from __future__ import annotations

import math
import time

import numpy as np
import torch

from .losses import LossConfig, ohem_ce
from .memory import MemorySegmenter, average_masks, run_sequence
from .metrics import ConfusionMatrix, iou_metrics
from .numerics import finite_diff_check, scaled_dot_attention
from .spmm import CurrentPrototypes, PrototypeBank, compute_current_prototypes, momentum_update, proto_loss


def _attention(rng):
    q, k, v = (torch.tensor(rng.normal(size=s)) for s in ((5, 4), (7, 4), (7, 3)))
    got = scaled_dot_attention(q, k, v)
    want = torch.zeros(5, 3, dtype=torch.float64)
    for i in range(5):
        s = [math.exp(float(q[i] @ k[j]) / 2.0) for j in range(7)]
        z = sum(s)
        for j in range(7):
            want[i] += s[j] / z * v[j]
    return float((got - want).abs().max()) < 1e-12


def _average_masks(rng):
    ms = [torch.tensor(rng.normal(size=(3, 4, 4))) for _ in range(3)]
    got = average_masks(ms)
    want = torch.tensor([[[sum(float(m[c, i, j]) for m in ms) / 3 for j in range(4)] for i in range(4)]
                         for c in range(3)], dtype=torch.float64)
    return float((got - want).abs().max()) < 1e-7


def _prototypes(rng):
    feat = torch.tensor(rng.normal(size=(1, 32, 8, 8)))
    mask = torch.tensor(rng.integers(0, 3, size=(8, 8)))
    cur = compute_current_prototypes([feat], mask, lambda x: x, 3)
    for t in range(3):
        pix = [feat[0, :, i, j] for i in range(8) for j in range(8) if int(mask[i, j]) == t]
        if pix and float((torch.stack(pix).mean(0) - cur.values[t]).abs().max()) > 1e-7:
            return False
    return True


def _momentum(rng):
    p = torch.tensor(rng.normal(size=(2, 32)))
    for mu in (0.05, 0.2, 0.8):
        bank = PrototypeBank(2, mu, dtype=torch.float64)
        bank.global_ = torch.tensor(rng.normal(size=(2, 32)))
        bank.seen[:] = True
        d0 = float((bank.global_ - p).norm())
        for _ in range(10):
            momentum_update(bank, CurrentPrototypes(p, torch.ones(2, dtype=torch.bool)))
        if abs(float((bank.global_ - p).norm()) - (1 - mu) ** 10 * d0) > 1e-9:
            return False
    return True


def _proto_loss(rng):
    bank = PrototypeBank(4, dtype=torch.float64)
    bank.seen[:] = True
    cur = CurrentPrototypes(torch.ones(4, 32, dtype=torch.float64), torch.ones(4, dtype=torch.bool))
    return abs(float(proto_loss(bank, cur, 64, 64)) - 256.0) < 1e-9


def _ohem_limit(rng):
    logits = torch.tensor(rng.normal(size=(4, 8, 8)))
    gt = torch.tensor(rng.integers(0, 4, size=(8, 8)))
    gt[0, :3] = 255
    got = ohem_ce(gt, logits, LossConfig(ohem_threshold=1.0, ohem_min_kept=1.0))
    total, n = 0.0, 0
    for i in range(8):
        for j in range(8):
            if int(gt[i, j]) == 255:
                continue
            z = sum(math.exp(float(logits[c, i, j])) for c in range(4))
            total += -math.log(math.exp(float(logits[int(gt[i, j]), i, j])) / z)
            n += 1
    return abs(float(got) - total / n) <= 1e-7 * max(1.0, total / n)


def _miou(rng):
    gt = rng.integers(0, 4, size=(32, 32))
    pred = np.where(rng.random((32, 32)) < 0.7, gt, rng.integers(0, 4, size=(32, 32)))
    m = iou_metrics(ConfusionMatrix(4).update(pred, gt))
    want = []
    for t in range(4):
        a, b = set(zip(*np.nonzero(pred == t))), set(zip(*np.nonzero(gt == t)))
        want.append(100.0 * len(a & b) / len(a | b))
    return abs(m.miou - float(np.mean(want))) < 0.01


def _gradients(rng):
    torch.manual_seed(0)
    model = MemorySegmenter(num_classes=3, spmm=False).double()
    frames = torch.tensor(rng.normal(size=(1, 2, 1, 32, 32)))
    with torch.no_grad():
        for lw in model.encoder.lora_modules():
            lw.w_b_q.normal_(0, 0.1)
    params = {"head": model.decoder.head.weight, "mem_q_bias": model.memory_attention.q.bias}

    def f():
        return run_sequence(model, frames).fused_logits.pow(2).mean()
    return finite_diff_check(f, params).max_relative_error < 1e-4


CHECKS = {
    "attention": _attention,
    "average_masks": _average_masks,
    "prototype_pooling": _prototypes,
    "momentum_convergence": _momentum,
    "proto_loss_value": _proto_loss,
    "ohem_plain_ce_limit": _ohem_limit,
    "miou": _miou,
    "gradients": _gradients,
}


def run_checks(seed: int = 0, echo=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        t = time.perf_counter()
        passed = bool(fn(np.random.default_rng(seed)))
        ok &= passed
        echo(f"{'PASS' if passed else 'FAIL'}  {name}  ({time.perf_counter() - t:.2f}s)")
    return ok
