import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalmem.data import (FG_FRACTION, IGNORE_INDEX, MODALITIES, AugmentParams, augment, generate_dataset,
                           geometric_transform, load_manifest, load_sequence, make_sequence)
from modalmem.raster import RasterFormatError, decode_raster, encode_raster, load_raster

MODS = ["intensity", "distance", "edge_event", "sparse_range"]


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8, np.int64])
def test_raster_roundtrip(dtype):
    a = (np.arange(24).reshape(2, 3, 4) % 7).astype(dtype)
    b = decode_raster(encode_raster(a))
    assert b.dtype == a.dtype and b.shape == a.shape and np.array_equal(a, b)


def test_raster_header_layout():
    buf = encode_raster(np.zeros((1, 2, 3), dtype=np.float32))
    assert buf[:8] == b"MMRAST01"
    assert buf[8] == 1 and buf[9] == 3
    assert buf[12:24] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(buf) == 24 + 6 * 4


def test_raster_rejects_garbage():
    with pytest.raises(RasterFormatError):
        decode_raster(b"NOTARAST" + bytes(8))
    good = encode_raster(np.zeros(4, dtype=np.float32))
    with pytest.raises(RasterFormatError):
        decode_raster(good[:-1])


def test_generation_is_deterministic(tmp_path):
    a = generate_dataset(5, 4, 32, MODS, 4, tmp_path / "a")
    b = generate_dataset(5, 4, 32, MODS, 4, tmp_path / "b")
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()
    for sa, sb in zip(a.samples, b.samples):
        for pa, pb in zip(sa.frames + [sa.label], sb.frames + [sb.label]):
            assert (a.root / pa).read_bytes() == (b.root / pb).read_bytes()


def test_generation_counts(tmp_path):
    m = generate_dataset(1, 10, 32, ["intensity", "sparse_range"], 3, tmp_path)
    assert len(m.samples) == 10
    assert all(len(s.frames) == 2 for s in m.samples)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["modalities"] == ["intensity", "sparse_range"]
    assert [s["split"] for s in doc["samples"]].count("val") == 2


def test_generated_labels_and_fg_fraction(tmp_path):
    m = generate_dataset(2, 30, 64, MODS, 5, tmp_path)
    for s in m.samples:
        lab = load_raster(m.root / s.label)
        assert set(np.unique(lab)) <= set(range(5)) | {IGNORE_INDEX}
        assert FG_FRACTION[0] <= (lab > 0).mean() <= FG_FRACTION[1]


def test_modalities_differ_and_are_complementary(tmp_path):
    m = generate_dataset(4, 2, 32, MODS, 4, tmp_path)
    seq = load_sequence(m, m.samples[0])
    flat = [f.ravel() for f in seq.frames]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not np.array_equal(flat[i], flat[j])
    # sparse_range is distance restricted to a sparse mask
    dist, sparse = seq.frames[1], seq.frames[3]
    nz = sparse != 0
    assert 0.05 < nz.mean() < 0.3
    assert np.allclose(sparse[nz], dist[nz])


@pytest.mark.parametrize("kw, msg", [
    (dict(modalities=["rgb"]), "unknown modality"),
    (dict(num_classes=33), "bound"),
    (dict(num_classes=1), ">= 2"),
    (dict(size=16), "size"),
])
def test_generation_errors(tmp_path, kw, msg):
    args = dict(seed=0, n_scenes=1, size=32, modalities=["intensity"], num_classes=3, out=tmp_path)
    args.update(kw)
    with pytest.raises(ValueError, match=msg):
        generate_dataset(**args)


def test_manifest_load_checks_paths(tmp_path):
    m = generate_dataset(0, 2, 32, ["intensity"], 3, tmp_path)
    assert load_manifest(tmp_path).modalities == ["intensity"]
    (m.root / m.samples[1].frames[0]).unlink()
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "manifest.json")


def test_make_sequence_single_frame_identity():
    f = np.random.default_rng(0).normal(size=(1, 8, 8)).astype(np.float32)
    seq = make_sequence([f], np.zeros((8, 8), dtype=np.int64))
    assert len(seq) == 1 and np.array_equal(seq.frames[0], f)


def test_make_sequence_keeps_order(tmp_path):
    m = generate_dataset(0, 1, 32, list(MODALITIES), 3, tmp_path)
    seq = load_sequence(m, m.samples[0])
    for name, frame in zip(MODALITIES, seq.frames):
        assert np.array_equal(frame, load_raster(m.root / f"scene_0000/{name}.rast"))


def test_make_sequence_rejects_misaligned():
    with pytest.raises(ValueError):
        make_sequence([np.zeros((1, 8, 8)), np.zeros((1, 9, 8))], np.zeros((8, 8)))


def _seq(rng, m=3, h=16, w=16, c=4):
    frames = [rng.normal(size=(1, h, w)).astype(np.float32) for _ in range(m)]
    return make_sequence(frames, rng.integers(0, c, size=(h, w)))


def test_flip_is_involution(rng):
    s = _seq(rng)
    back = geometric_transform(geometric_transform(s, True, None), True, None)
    assert all(np.array_equal(a, b) for a, b in zip(s.frames, back.frames))
    assert np.array_equal(s.labels, back.labels)


def test_full_crop_no_flip_no_blur_is_identity(rng):
    s = _seq(rng)
    out = augment(s, rng, AugmentParams(flip_p=0.0, blur_p=0.0, crop_fraction=1.0))
    assert all(np.array_equal(a, b) for a, b in zip(s.frames, out.frames))
    assert np.array_equal(s.labels, out.labels)


def test_flip_preserves_label_histogram(rng):
    s = _seq(rng)
    f = geometric_transform(s, True, None)
    assert np.array_equal(np.bincount(s.labels.ravel(), minlength=4), np.bincount(f.labels.ravel(), minlength=4))


def test_blur_never_touches_labels(rng):
    s = _seq(rng)
    out = augment(s, rng, AugmentParams(flip_p=0.0, blur_p=1.0, crop_fraction=1.0))
    assert np.array_equal(out.labels, s.labels)
    assert not np.array_equal(out.frames[0], s.frames[0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.booleans(), st.integers(8, 16), st.integers(8, 16))
def test_geometric_consistency(seed, flip, h, w):
    # frames and labels encode their source coordinate; after the transform they must agree
    H = W = 16
    r = np.random.default_rng(seed)
    t, l = int(r.integers(0, H - h + 1)), int(r.integers(0, W - w + 1))
    coord = (np.arange(H)[:, None] * W + np.arange(W)[None, :])
    s = make_sequence([coord[None].astype(np.float32)] * 2, coord.astype(np.int64))
    out = geometric_transform(s, flip, (t, l, h, w), frame_mode="nearest")
    for f in out.frames:
        assert np.array_equal(f[0].astype(np.int64), out.labels)


def test_augment_is_seeded(rng):
    s = _seq(rng)
    a = augment(s, np.random.default_rng(9))
    b = augment(s, np.random.default_rng(9))
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
