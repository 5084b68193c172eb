"""Synthetic multi-modal scenes, the on-disk dataset container, and augmentation.

A scene is a handful of geometric shapes on a background. Each shape's class
fixes both its outline (disc, square, triangle, diamond, cycling) and its
brightness, and every modality renders the scene with its own weakness:

* ``intensity``: class brightness under random illumination plus noise.
  A per-scene severity from the corruption schedule can turn it into a
  near-failed sensor.
* ``distance``: clean signed distance to the object boundary. It carries
  geometry but no brightness.
* ``edge_event``: gradient magnitude of the clean brightness image with
  random pixel dropout.
* ``sparse_range``: ``distance`` kept on a sparse random mask, zero elsewhere.

Dataset layout::

    <out>/manifest.json
    <out>/scene_0000/<modality>.rast   (1 x H x W float32)
    <out>/scene_0000/label.rast        (H x W uint8, 255 = ignore)
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .raster import load_raster, save_raster

MODALITIES = ("intensity", "distance", "edge_event", "sparse_range")
IGNORE_INDEX = 255
MAX_CLASSES = 32
SHAPES = ("disc", "square", "triangle", "diamond")
FG_FRACTION = (0.05, 0.6)

# severity schedule for the intensity sensor: (name, noise sigma, probability)
INTENSITY_SEVERITY = (("clean", 0.05, 0.5), ("noisy", 0.15, 0.3), ("failed", 0.5, 0.2))


@dataclass
class ModalitySequence:
    frames: list[np.ndarray]
    labels: np.ndarray
    scene_id: str = ""

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a sequence needs at least one frame")
        shape = self.frames[0].shape
        for f in self.frames:
            if f.ndim != 3 or f.shape != shape:
                raise ValueError(f"frame shapes disagree: {f.shape} vs {shape}")
        if self.labels.shape != shape[1:]:
            raise ValueError(f"label shape {self.labels.shape} does not match frames {shape[1:]}")

    def __len__(self):
        return len(self.frames)

    def stacked(self) -> np.ndarray:
        return np.stack(self.frames)


@dataclass
class SampleEntry:
    scene_id: str
    frames: list[str]
    label: str
    split: str = "train"
    corruption: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    root: Path
    samples: list[SampleEntry]
    modalities: list[str]
    num_classes: int
    seed: int
    size: int = 0

    def split(self, name: str) -> list[SampleEntry]:
        if name == "all":
            return list(self.samples)
        return [s for s in self.samples if s.split == name]

    def to_json(self) -> str:
        doc = {
            "format": "modalmem-dataset/1",
            "seed": self.seed,
            "size": self.size,
            "num_classes": self.num_classes,
            "modalities": self.modalities,
            "ignore_index": IGNORE_INDEX,
            "corruption_schedule": {
                "intensity": [{"name": n, "noise_sigma": s, "p": p} for n, s, p in INTENSITY_SEVERITY],
                "edge_event": {"dropout_p": 0.3},
                "sparse_range": {"keep_p": 0.15},
            },
            "samples": [
                {"scene_id": s.scene_id, "frames": s.frames, "label": s.label,
                 "split": s.split, "corruption": s.corruption}
                for s in self.samples
            ],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise OSError(f"cannot read manifest {path}: {e}") from e
    root = path.parent
    samples = [SampleEntry(d["scene_id"], list(d["frames"]), d["label"], d.get("split", "train"),
                           d.get("corruption", {}))
               for d in doc["samples"]]
    for s in samples:
        if len(s.frames) != len(doc["modalities"]):
            raise ValueError(f"{s.scene_id}: {len(s.frames)} frames for {len(doc['modalities'])} modalities")
        for p in (*s.frames, s.label):
            if not (root / p).exists():
                raise FileNotFoundError(f"{s.scene_id}: missing {root / p}")
    return DatasetManifest(root, samples, list(doc["modalities"]), int(doc["num_classes"]),
                           int(doc["seed"]), int(doc.get("size", 0)))


# ---------------------------------------------------------------- rendering

def _shape_mask(kind: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r * 1.15
    # upward triangle inscribed in the radius-r circle
    top = cy - r
    base = cy + r * 0.6
    half = (yy - top) / (base - top) * r * 1.1
    return (yy >= top) & (yy <= base) & (np.abs(dx) <= half)


def class_brightness(num_classes: int) -> np.ndarray:
    """Clean brightness per class; background darkest."""
    return np.linspace(0.1, 1.0, num_classes)


def _layout(rng: np.random.Generator, size: int, num_classes: int) -> np.ndarray:
    for _ in range(100):
        label = np.zeros((size, size), dtype=np.uint8)
        for _ in range(int(rng.integers(1, 5))):
            cls = int(rng.integers(1, num_classes))
            r = rng.uniform(0.1, 0.22) * size
            cy, cx = rng.uniform(r * 0.8, size - r * 0.8, size=2)
            label[_shape_mask(SHAPES[(cls - 1) % len(SHAPES)], cy, cx, r, size)] = cls
        frac = float((label > 0).mean())
        if FG_FRACTION[0] <= frac <= FG_FRACTION[1]:
            return label
    raise RuntimeError("could not place shapes within the foreground-fraction bounds")


def _signed_distance(label: np.ndarray) -> np.ndarray:
    fg = label > 0
    inside = ndimage.distance_transform_edt(fg)
    outside = ndimage.distance_transform_edt(~fg)
    return np.tanh((inside - outside) / 6.0)


def render_scene(rng: np.random.Generator, size: int, modalities: Sequence[str],
                 num_classes: int) -> tuple[list[np.ndarray], np.ndarray, dict]:
    label = _layout(rng, size, num_classes)
    clean = class_brightness(num_classes)[label]
    sdf = _signed_distance(label)

    levels = [s for _, s, _ in INTENSITY_SEVERITY]
    probs = [p for _, _, p in INTENSITY_SEVERITY]
    sev = int(rng.choice(len(levels), p=probs))
    illum = float(rng.uniform(0.6, 1.4))
    noise = rng.normal(0.0, levels[sev], size=label.shape)
    edge_drop = rng.random(label.shape) < 0.3
    range_keep = rng.random(label.shape) < 0.15

    rendered = {}
    rendered["intensity"] = clean * illum + noise
    rendered["distance"] = sdf
    gy, gx = np.gradient(clean)
    rendered["edge_event"] = np.hypot(gy, gx) * 4.0 * ~edge_drop
    rendered["sparse_range"] = sdf * range_keep

    frames = [rendered[m][None].astype(np.float32) for m in modalities]
    meta = {"intensity_severity": INTENSITY_SEVERITY[sev][0], "illumination": round(illum, 6)}
    return frames, label, meta


def generate_dataset(seed: int, n_scenes: int, size: int, modalities: Sequence[str],
                     num_classes: int, out: str | Path, val_fraction: float = 0.2) -> DatasetManifest:
    """Render ``n_scenes`` scenes under ``out`` and write ``manifest.json``.

    Output is a pure function of the arguments (byte-identical on rerun).
    The last ``val_fraction`` of scenes form the ``val`` split.
    """
    modalities = list(modalities)
    unknown = [m for m in modalities if m not in MODALITIES]
    if unknown:
        raise ValueError(f"unknown modality {unknown[0]!r}; choose from {', '.join(MODALITIES)}")
    if not modalities:
        raise ValueError("need at least one modality")
    if num_classes > MAX_CLASSES:
        raise ValueError(f"num_classes={num_classes} exceeds the prototype bank bound {MAX_CLASSES}")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2 (background counts as a class)")
    if size < 32:
        raise ValueError("size must be >= 32")

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    n_val = int(round(n_scenes * val_fraction)) if n_scenes > 1 else 0
    samples = []
    for i in range(n_scenes):
        # one independent stream per scene keeps scenes parallelisable
        rng = np.random.default_rng([seed, i])
        frames, label, meta = render_scene(rng, size, modalities, num_classes)
        sid = f"scene_{i:04d}"
        d = out / sid
        d.mkdir(exist_ok=True)
        paths = []
        for m, fr in zip(modalities, frames):
            save_raster(d / f"{m}.rast", fr)
            paths.append(f"{sid}/{m}.rast")
        save_raster(d / "label.rast", label)
        split = "val" if i >= n_scenes - n_val else "train"
        samples.append(SampleEntry(sid, paths, f"{sid}/label.rast", split, meta))
    manifest = DatasetManifest(out, samples, modalities, num_classes, seed, size)
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_sequence(manifest: DatasetManifest, entry: SampleEntry) -> ModalitySequence:
    frames = [load_raster(manifest.root / p).astype(np.float32) for p in entry.frames]
    labels = load_raster(manifest.root / entry.label).astype(np.int64)
    return make_sequence(frames, labels, entry.scene_id)


def make_sequence(frames: Sequence[np.ndarray], labels: np.ndarray, scene_id: str = "") -> ModalitySequence:
    """Treat aligned modality rasters as an ordered frame sequence (order kept as given)."""
    frames = [np.asarray(f) for f in frames]
    if frames and any(f.shape[-2:] != frames[0].shape[-2:] for f in frames):
        raise ValueError("modalities are not spatially aligned: "
                         + ", ".join(str(f.shape) for f in frames))
    return ModalitySequence(list(frames), np.asarray(labels), scene_id)


# ------------------------------------------------------------- augmentation

@dataclass
class AugmentParams:
    flip_p: float = 0.5
    blur_p: float = 0.25
    crop_fraction: float = 0.875


def geometric_transform(seq: ModalitySequence, flip: bool, crop: tuple[int, int, int, int] | None,
                        frame_mode: str = "bilinear") -> ModalitySequence:
    """Apply one flip/crop-resize to every frame and the labels.

    ``crop`` is (top, left, height, width); the crop is resized back to H x W,
    labels with nearest neighbour.
    """
    frames = np.stack(seq.frames)
    labels = seq.labels
    H, W = labels.shape
    if flip:
        frames = frames[..., ::-1]
        labels = labels[:, ::-1]
    if crop is not None and crop != (0, 0, H, W):
        t, l, h, w = crop
        if h > H or w > W or t + h > H or l + w > W:
            raise ValueError(f"crop {crop} exceeds raster {H}x{W}")
        fr = torch.from_numpy(np.ascontiguousarray(frames[..., t:t + h, l:l + w]))
        kw = {"align_corners": False} if frame_mode == "bilinear" else {}
        frames = F.interpolate(fr, size=(H, W), mode=frame_mode, **kw).numpy()
        lb = torch.from_numpy(np.ascontiguousarray(labels[t:t + h, l:l + w])).double()[None, None]
        labels = F.interpolate(lb, size=(H, W), mode="nearest")[0, 0].numpy().astype(seq.labels.dtype)
    return ModalitySequence([np.ascontiguousarray(f) for f in frames],
                            np.ascontiguousarray(labels), seq.scene_id)


_BLUR = np.outer([1, 2, 1], [1, 2, 1]) / 16.0


def blur_frame(frame: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.convolve(c, _BLUR, mode="nearest") for c in frame]).astype(frame.dtype)


def augment(seq: ModalitySequence, rng: np.random.Generator,
            params: AugmentParams | None = None) -> ModalitySequence:
    p = params or AugmentParams()
    H, W = seq.labels.shape
    flip = bool(rng.random() < p.flip_p)
    h = max(1, int(math.floor(H * p.crop_fraction)))
    w = max(1, int(math.floor(W * p.crop_fraction)))
    t = int(rng.integers(0, H - h + 1))
    l = int(rng.integers(0, W - w + 1))
    out = geometric_transform(seq, flip, (t, l, h, w))
    blurred = [blur_frame(f) if rng.random() < p.blur_p else f for f in out.frames]
    return ModalitySequence(blurred, out.labels, seq.scene_id)


class SceneSet:
    """All scenes of one split held in memory as tensors."""

    def __init__(self, manifest: DatasetManifest, split: str = "train"):
        self.manifest = manifest
        self.entries = manifest.split(split)
        self.sequences = [load_sequence(manifest, e) for e in self.entries]

    def __len__(self):
        return len(self.sequences)

    def __getitem__(self, i) -> ModalitySequence:
        return self.sequences[i]


def collate(seqs: Sequence[ModalitySequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack sequences into frames (B, M, C, H, W) float32 and labels (B, H, W) int64."""
    frames = torch.from_numpy(np.stack([s.stacked() for s in seqs]).astype(np.float32))
    labels = torch.from_numpy(np.stack([s.labels for s in seqs]).astype(np.int64))
    return frames, labels
