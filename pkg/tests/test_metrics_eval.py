import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalmem.config import RunConfig
from modalmem.evaluate import (ABLATION_ROWS, ablation_run, data_order_digest, export_split_features,
                               format_ablation_table)
from modalmem.metrics import ConfusionMatrix, iou_metrics
from modalmem.raster import load_raster
from modalmem.train import build_model


def test_small_example():
    m = iou_metrics(ConfusionMatrix(2).update([0, 0, 1, 1], [0, 1, 1, 1]))
    assert np.allclose(m.per_class_iou, [50.0, 66.6667], atol=1e-3)
    assert round(m.miou, 2) == 58.33
    assert np.allclose(m.per_class_acc, [100.0, 66.6667], atol=1e-3)


def test_perfect_and_disjoint():
    gt = np.array([0, 1, 2, 2])
    assert iou_metrics(ConfusionMatrix(3).update(gt, gt)).miou == 100.0
    assert iou_metrics(ConfusionMatrix(3).update((gt + 1) % 3, gt)).miou == 0.0


def test_out_of_range_rejected():
    with pytest.raises(ValueError):
        ConfusionMatrix(2).update([0, 2], [0, 1])
    with pytest.raises(ValueError):
        ConfusionMatrix(2).update([0], [0, 1])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_brute_force(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 4, size=(32, 32))
    pred = np.where(rng.random((32, 32)) < 0.6, gt, rng.integers(0, 4, size=(32, 32)))
    m = iou_metrics(ConfusionMatrix(4).update(pred, gt))
    want = []
    for t in range(4):
        a = {(i, j) for i in range(32) for j in range(32) if pred[i, j] == t}
        b = {(i, j) for i in range(32) for j in range(32) if gt[i, j] == t}
        want.append(100.0 * len(a & b) / len(a | b) if a | b else 0.0)
    assert abs(m.miou - np.mean(want)) < 0.01


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ignore_pixels_do_not_count(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 3, size=64)
    pred = rng.integers(0, 3, size=64)
    ign = gt.copy()
    ign[::3] = 255
    noisy = pred.copy()
    noisy[::3] = rng.integers(0, 3, size=noisy[::3].shape)
    a = iou_metrics(ConfusionMatrix(3).update(pred, ign))
    b = iou_metrics(ConfusionMatrix(3).update(noisy, ign))
    c = iou_metrics(ConfusionMatrix(3).update(pred[gt == ign], gt[gt == ign]))
    assert a.miou == b.miou == c.miou


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_relabel_invariance(seed):
    rng = np.random.default_rng(seed)
    gt, pred = rng.integers(0, 4, size=100), rng.integers(0, 4, size=100)
    perm = rng.permutation(4)
    a = iou_metrics(ConfusionMatrix(4).update(pred, gt))
    b = iou_metrics(ConfusionMatrix(4).update(perm[pred], perm[gt]))
    assert abs(a.miou - b.miou) < 1e-9
    assert np.allclose(b.per_class_iou[perm], a.per_class_iou)


def test_absent_class_policy():
    cm = ConfusionMatrix(3).update([0, 1], [0, 1])
    assert iou_metrics(cm).miou == pytest.approx(200 / 3)
    assert iou_metrics(cm, include_absent=False).miou == 100.0


def test_matrix_addition():
    a = ConfusionMatrix(2).update([0, 1], [0, 0])
    b = ConfusionMatrix(2).update([1], [1])
    assert (a + b).total == 3
    assert (a + b).counts.tolist() == [[1, 1], [0, 1]]


def test_feature_export(tiny_dataset, tmp_path):
    cfg = RunConfig(epochs=3, warmup_epochs=1, num_classes=3)
    model = build_model(cfg)
    doc = export_split_features(model, tiny_dataset, cfg, tmp_path / "a", "val", limit=1)
    names = sorted(e["file"] for e in doc["features"])
    assert sum(n.endswith("__pre_memory.rast") for n in names) == 3
    assert sum(n.endswith("__post_memory.rast") for n in names) == 2
    assert not any(n.startswith(tiny_dataset.split("val")[0].scene_id + "__1_") and "post" in n for n in names)
    for e in doc["features"]:
        arr = load_raster(tmp_path / "a" / e["file"])
        assert arr.shape == (4, cfg.c_e)             # 32x32 input gives a 2x2 grid
    export_split_features(model, tiny_dataset, cfg, tmp_path / "b", "val", limit=1)
    for n in names + ["features.json"]:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_ablation_rows(tiny_dataset, tmp_path):
    cfg = RunConfig(epochs=2, warmup_epochs=1, num_classes=3)
    rows = ablation_run(tiny_dataset, cfg, tmp_path)
    assert [(r.memory_mechanism, r.spmm, r.residual_connection) for r in rows] == \
        [(m, s, r) for _, m, s, r, _ in ABLATION_ROWS]
    assert len({r.data_order_digest for r in rows}) == 1
    assert rows[0].data_order_digest == data_order_digest(cfg, len(tiny_dataset.split("train")))
    assert all(0 <= r.miou <= 100 for r in rows)
    doc = json.loads((tmp_path / "ablation.json").read_text())
    assert len(doc["rows"]) == 4
    assert len(format_ablation_table(rows).splitlines()) == 5
