"""Generate the seeded toy dataset and train the full configuration on it.

    python3 scripts/run_toy_benchmark.py --out runs/toy
"""
import argparse
import json
import time
from pathlib import Path

from modalmem.config import load_config
from modalmem.data import generate_dataset
from modalmem.evaluate import evaluate_model
from modalmem.train import fit

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--config", default=str(ROOT / "configs" / "toy.cfg"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    manifest = generate_dataset(args.seed, 200, 64, ["intensity", "edge_event", "sparse_range"], 4, out / "data")
    cfg = load_config(args.config).replace(seed=args.seed, manifest=str(out / "data" / "manifest.json"))
    t0 = time.perf_counter()
    res = fit(manifest, cfg, out / "train")
    seconds = time.perf_counter() - t0
    m = evaluate_model(res.checkpoint.model, manifest, cfg)
    print(json.dumps({"val_miou": round(m.miou, 2), "iou": m.as_dict()["iou"], "seconds": round(seconds, 1)}))


if __name__ == "__main__":
    main()
