"""Held-out evaluation, the four-row ablation harness, and feature export."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import DatasetManifest, SceneSet, collate, load_manifest
from .memory import MemorySegmenter, SequenceOutput, run_sequence
from .metrics import Metrics, iou_metrics
from .raster import save_raster
from .train import batch_indices, evaluate, fit

# (name, memory_mechanism, spmm, residual_connection, reference mIoU)
ABLATION_ROWS = (
    ("no_memory+residual", False, False, True, 58.79),
    ("memory", True, False, False, 61.70),
    ("memory+residual", True, False, True, 62.41),
    ("memory+residual+spmm", True, True, True, 63.48),
)

MAX_EXPORT_VECTORS = 5000


def evaluate_model(model: MemorySegmenter, manifest: DatasetManifest, cfg: RunConfig,
                   split: str = "val") -> Metrics:
    return iou_metrics(evaluate(model, SceneSet(manifest, split), cfg))


@dataclass
class AblationRow:
    name: str
    memory_mechanism: bool
    spmm: bool
    residual_connection: bool
    miou: float
    reference_miou: float
    data_order_digest: str
    train_seconds: float = 0.0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def data_order_digest(cfg: RunConfig, n_train: int) -> str:
    """Hash of every epoch's batch order; equal across rows means identical data order."""
    h = hashlib.sha256()
    for e in range(cfg.epochs):
        for b in batch_indices(cfg, n_train, e):
            h.update(np.asarray(b, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


def ablation_run(manifest: DatasetManifest | str | Path, base_cfg: RunConfig,
                 out_dir: str | Path | None = None) -> list[AblationRow]:
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    n_train = len(manifest.split(base_cfg.train_split))
    rows = []
    for name, mem, spmm, res, ref in ABLATION_ROWS:
        cfg = base_cfg.replace(memory_mechanism=mem, spmm=spmm, residual_connection=res,
                               num_classes=manifest.num_classes)
        sub = Path(out_dir) / name if out_dir is not None else None
        t0 = time.perf_counter()
        result = fit(manifest, cfg, sub)
        seconds = time.perf_counter() - t0
        m = evaluate_model(result.checkpoint.model, manifest, cfg, cfg.val_split)
        rows.append(AblationRow(name, mem, spmm, res, round(m.miou, 2), ref, data_order_digest(cfg, n_train),
                                round(seconds, 1)))
    if out_dir is not None:
        write_ablation_table(rows, Path(out_dir) / "ablation.json")
    return rows


def write_ablation_table(rows: list[AblationRow], path: Path):
    path.write_text(json.dumps({"rows": [r.as_dict() for r in rows]}, indent=1) + "\n")


def format_ablation_table(rows: list[AblationRow]) -> str:
    mark = lambda b: "yes" if b else "no"  # noqa: E731
    lines = [f"{'memory':>7} {'spmm':>5} {'residual':>9} {'mIoU':>7} {'ref':>7}"]
    for r in rows:
        lines.append(f"{mark(r.memory_mechanism):>7} {mark(r.spmm):>5} {mark(r.residual_connection):>9} "
                     f"{r.miou:7.2f} {r.reference_miou:7.2f}")
    return "\n".join(lines)


def _tokens(feat: torch.Tensor) -> np.ndarray:
    # (C, h, w) -> (h*w, C)
    return feat.detach().reshape(feat.shape[0], -1).T.contiguous().numpy().astype(np.float32)


def _cap(vectors: np.ndarray, scene_id: str, modality: str, stage: str) -> np.ndarray:
    if len(vectors) <= MAX_EXPORT_VECTORS:
        return vectors
    seed = int(hashlib.sha256(f"{scene_id}/{modality}/{stage}".encode()).hexdigest()[:8], 16)
    keep = np.sort(np.random.default_rng(seed).choice(len(vectors), MAX_EXPORT_VECTORS, replace=False))
    return vectors[keep]


def export_features(outputs: list[tuple[str, SequenceOutput]], modalities: list[str], path: str | Path) -> dict:
    """Dump token vectors before and after memory attention, per scene and modality.

    ``outputs`` pairs a scene id with the ``SequenceOutput`` of that single
    scene (batch dim 1). Frame 1 has no post-memory features. Returns the
    index written to ``features.json``.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    index = []
    for scene_id, out in outputs:
        for i, feat in enumerate(out.pre_memory_features):
            stages = [("pre_memory", feat)]
            if i >= 1 and len(out.post_memory_features) >= i:
                stages.append(("post_memory", out.post_memory_features[i - 1]))
            for stage, f in stages:
                f = f[0] if f.dim() == 4 else f
                vec = _cap(_tokens(f), scene_id, modalities[i], stage)
                name = f"{scene_id}__{i + 1}_{modalities[i]}__{stage}.rast"
                save_raster(root / name, vec)
                index.append({"file": name, "scene": scene_id, "modality": modalities[i],
                              "frame": i + 1, "stage": stage, "shape": list(vec.shape)})
    doc = {"max_vectors": MAX_EXPORT_VECTORS, "features": index}
    (root / "features.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


@torch.no_grad()
def export_split_features(model: MemorySegmenter, manifest: DatasetManifest, cfg: RunConfig, path,
                          split: str = "val", limit: int | None = None) -> dict:
    model.eval()
    scenes = SceneSet(manifest, split)
    outs = []
    for seq in scenes.sequences[:limit]:
        frames, _ = collate([seq])
        outs.append((seq.scene_id, run_sequence(model, frames, memory=cfg.memory_mechanism,
                                                residual=cfg.residual_connection)))
    return export_features(outs, manifest.modalities, path)
