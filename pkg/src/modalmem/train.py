"""Schedule, optimisation step, training loop and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, parse_config
from .data import DatasetManifest, SceneSet, augment, collate, load_manifest
from .losses import LossConfig, total_loss
from .memory import MemorySegmenter, run_sequence
from .metrics import ConfusionMatrix, iou_metrics
from .numerics import NonFiniteError
from .spmm import PrototypeBank, compute_current_prototypes, downsample_labels, momentum_update, proto_loss

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MMCKPT01"


def warmup_poly_lr(step: int, total_steps: int, cfg: RunConfig, steps_per_epoch: int) -> float:
    """Linear warmup from ``warmup_ratio * base_lr`` to ``base_lr``, then polynomial decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = min(cfg.warmup_epochs * steps_per_epoch, total_steps)
    if step < w:
        return cfg.base_lr * (cfg.warmup_ratio + (1 - cfg.warmup_ratio) * step / w)
    if total_steps == w:
        return cfg.base_lr
    return cfg.base_lr * (1 - (step - w) / (total_steps - w)) ** cfg.poly_power


def build_model(cfg: RunConfig) -> MemorySegmenter:
    torch.manual_seed(cfg.seed)
    model = MemorySegmenter(
        in_ch=cfg.in_channels, num_classes=cfg.num_classes, widths=cfg.widths, window=cfg.window,
        lora_rank=cfg.lora_rank, c_e=cfg.c_e, c_mem=cfg.c_mem, decoder_width=cfg.decoder_width,
        spmm=cfg.spmm, spmm_reuse_projection=cfg.spmm_reuse_projection)
    apply_freeze(model, cfg)
    return model


def apply_freeze(model: MemorySegmenter, cfg: RunConfig):
    lora = {id(p) for m in model.encoder.lora_modules() for p in m.parameters()}
    for p in model.encoder.parameters():
        p.requires_grad_(not (cfg.freeze_lora if id(p) in lora else cfg.freeze_backbone))
    for p in model.decoder.parameters():
        p.requires_grad_(not cfg.freeze_decoder)
    if model.proto_proj is not None:
        for p in model.proto_proj.parameters():
            p.requires_grad_(not cfg.freeze_decoder)
    for p in model.memory_encoder.parameters():
        p.requires_grad_(not cfg.freeze_memory_encoder)
    for p in model.memory_attention.parameters():
        p.requires_grad_(not cfg.freeze_memory_attention)


def trainable_parameters(model: torch.nn.Module) -> list[tuple[str, torch.nn.Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def count_trainable(model: torch.nn.Module) -> int:
    return sum(p.numel() for _, p in trainable_parameters(model))


def make_optimizer(model: torch.nn.Module, cfg: RunConfig) -> torch.optim.Optimizer | None:
    params = [p for _, p in trainable_parameters(model)]
    if not params:
        return None
    return torch.optim.AdamW(params, lr=cfg.base_lr, betas=(0.9, 0.999), weight_decay=cfg.weight_decay)


@dataclass
class StepResult:
    loss: float
    l_proto: float
    l_ohem: float
    lr: float


def forward_losses(model, frames, labels, bank: PrototypeBank | None, cfg: RunConfig):
    out = run_sequence(model, frames, memory=cfg.memory_mechanism, residual=cfg.residual_connection)
    cur = None
    if cfg.spmm and bank is not None:
        H, W = labels.shape[-2:]
        mask_down = downsample_labels(out.fused_logits)
        cur = compute_current_prototypes(out.f_high1, mask_down, model.prototype_projection(), cfg.num_classes)
        lp = proto_loss(bank, cur, H, W)
    else:
        lp = out.fused_logits.new_zeros(())
    terms = total_loss(labels, out.fused_logits, lp,
                       LossConfig(cfg.alpha if cfg.spmm else 0.0, cfg.ohem_threshold, cfg.ohem_min_kept))
    return out, terms, cur


def train_step(model, optimizer, frames, labels, bank, cfg: RunConfig, lr: float) -> StepResult:
    """One optimisation step on a (B, M, C, H, W) batch; the bank is updated last."""
    if frames.shape[0] == 0:
        raise ValueError("empty batch")
    model.train()
    _, terms, cur = forward_losses(model, frames, labels, bank, cfg)
    if not torch.isfinite(terms.total):
        raise NonFiniteError(f"non-finite loss: total={terms.total.item()} proto={terms.proto.item()} "
                             f"ohem={terms.ohem.item()}")
    if optimizer is not None:
        for g in optimizer.param_groups:
            g["lr"] = lr
        optimizer.zero_grad(set_to_none=True)
        terms.total.backward()
        params = [p for g in optimizer.param_groups for p in g["params"]]
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        optimizer.step()
    if cur is not None:
        momentum_update(bank, cur)
    return StepResult(float(terms.total.detach()), float(terms.proto.detach()),
                      float(terms.ohem.detach()), lr)


@torch.no_grad()
def evaluate(model, scenes: SceneSet, cfg: RunConfig, batch_size: int = 16) -> ConfusionMatrix:
    model.eval()
    cm = ConfusionMatrix(cfg.num_classes)
    for i in range(0, len(scenes), batch_size):
        frames, labels = collate(scenes.sequences[i:i + batch_size])
        out = run_sequence(model, frames, memory=cfg.memory_mechanism, residual=cfg.residual_connection)
        cm.update(out.fused_logits.argmax(dim=1).numpy(), labels.numpy())
    return cm


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model: MemorySegmenter
    bank: PrototypeBank
    optimizer: torch.optim.Optimizer | None
    step: int
    cfg: RunConfig
    best_miou: float = -1.0
    extra: dict = field(default_factory=dict)


def _checkpoint_tensors(ck: Checkpoint) -> dict[str, torch.Tensor]:
    out = {f"model/{k}": v for k, v in ck.model.state_dict().items()}
    out.update({f"bank/{k}": v for k, v in ck.bank.state_dict().items()})
    if ck.optimizer is not None:
        names = {id(p): n for n, p in ck.model.named_parameters()}
        for p, st in ck.optimizer.state.items():
            for k, v in st.items():
                out[f"optim/{names[id(p)]}/{k}"] = torch.as_tensor(v)
    return out


_DT = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.bool: "|b1"}


def save_checkpoint(ck: Checkpoint, path: str | Path):
    """Write a checkpoint: magic, uint32 header length, JSON header, raw little-endian tensors."""
    tensors = _checkpoint_tensors(ck)
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        b = t.numpy().astype(_DT[t.dtype]).tobytes()
        entries.append({"name": name, "dtype": _DT[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = json.dumps({"step": ck.step, "best_miou": ck.best_miou, "config": ck.cfg.to_text(),
                         "config_hash": ck.cfg.hash(), "tensors": entries, "extra": ck.extra},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", len(header)) + header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12:12 + hlen])
    base = 12 + hlen
    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=base + e["offset"]).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    cfg = parse_config(header["config"])
    model = build_model(cfg)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
    bank = PrototypeBank(cfg.num_classes, cfg.mu)
    bank.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("bank/")})
    opt = make_optimizer(model, cfg)
    if opt is not None:
        params = dict(model.named_parameters())
        for k, v in tensors.items():
            if k.startswith("optim/"):
                pname, key = k[6:].rsplit("/", 1)
                opt.state[params[pname]][key] = v
    return Checkpoint(model, bank, opt, header["step"], cfg, header["best_miou"], header.get("extra", {}))


# -------------------------------------------------------------------- fit loop

def batch_indices(cfg: RunConfig, n: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    return [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def make_batch(scenes: SceneSet, idx, cfg: RunConfig, epoch: int):
    seqs = [scenes[int(i)] for i in idx]
    if cfg.augment:
        seqs = [augment(s, np.random.default_rng([cfg.seed, epoch, int(i), 7])) for s, i in zip(seqs, idx)]
    return collate(seqs)


@dataclass
class FitResult:
    checkpoint: Checkpoint
    log: list[dict]
    best_state: dict | None = None


def fit(manifest: DatasetManifest | str | Path, cfg: RunConfig, out_dir: str | Path | None = None,
        resume: Checkpoint | None = None, max_steps: int | None = None) -> FitResult:
    """Train per ``cfg``; writes metrics.jsonl, last.ckpt and best.ckpt to ``out_dir`` when given.

    ``max_steps`` stops early (used to interrupt runs when testing resume).
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    if manifest.num_classes != cfg.num_classes:
        cfg = cfg.replace(num_classes=manifest.num_classes)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(max(1, cfg.workers))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "resolved.cfg")

    if resume is not None:
        ck = resume
    else:
        model = build_model(cfg)
        ck = Checkpoint(model, PrototypeBank(cfg.num_classes, cfg.mu), make_optimizer(model, cfg), 0, cfg)
    train = SceneSet(manifest, cfg.train_split)
    val = SceneSet(manifest, cfg.val_split)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size) if len(train) else 0
    total = cfg.epochs * steps_per_epoch
    records: list[dict] = []
    best_state = None

    def emit(rec):
        records.append(rec)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    if out is not None and resume is None:
        (out / "metrics.jsonl").write_text("")
    while ck.step < total:
        if max_steps is not None and ck.step >= max_steps:
            break
        epoch, k = divmod(ck.step, steps_per_epoch)
        idx = batch_indices(cfg, len(train), epoch)[k]
        frames, labels = make_batch(train, idx, cfg, epoch)
        lr = warmup_poly_lr(ck.step, total, cfg, steps_per_epoch)
        res = train_step(ck.model, ck.optimizer, frames, labels, ck.bank, cfg, lr)
        ck.step += 1
        emit({"step": ck.step, "epoch": epoch, "lr": res.lr, "loss": res.loss,
              "l_proto": res.l_proto, "l_ohem": res.l_ohem})
        if ck.step % steps_per_epoch == 0 and ((epoch + 1) % cfg.eval_every == 0 or ck.step == total) and len(val):
            m = iou_metrics(evaluate(ck.model, val, cfg))
            emit({"step": ck.step, "epoch": epoch, "miou": round(m.miou, 4)})
            log.info("epoch %d  loss %.4f  val mIoU %.2f", epoch, res.loss, m.miou)
            if m.miou > ck.best_miou:
                ck.best_miou = m.miou
                best_state = {k: v.clone() for k, v in ck.model.state_dict().items()}
                if out is not None:
                    save_checkpoint(ck, out / "best.ckpt")
    if out is not None:
        save_checkpoint(ck, out / "last.ckpt")
    return FitResult(ck, records, best_state)
