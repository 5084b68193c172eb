"""Train the four ablation rows on the toy dataset and print the comparison table.

    python3 scripts/run_ablation.py --out runs/ablation
"""
import argparse
from pathlib import Path

from modalmem.config import load_config
from modalmem.data import generate_dataset, load_manifest
from modalmem.evaluate import ablation_run, format_ablation_table

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--config", default=str(ROOT / "configs" / "toy.cfg"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--manifest", help="reuse an existing dataset instead of generating one")
    args = ap.parse_args()

    out = Path(args.out)
    if args.manifest:
        manifest = load_manifest(args.manifest)
    else:
        manifest = generate_dataset(args.seed, 200, 64, ["intensity", "edge_event", "sparse_range"], 4,
                                    out / "data")
    cfg = load_config(args.config).replace(seed=args.seed)
    rows = ablation_run(manifest, cfg, out)
    print(format_ablation_table(rows))
    print(f"results in {out / 'ablation.json'}")


if __name__ == "__main__":
    main()
