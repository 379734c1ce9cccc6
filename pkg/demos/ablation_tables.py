"""Short ablation runs rendered in the usual table layouts.

    python3 demos/ablation_tables.py [--grid rank] [--steps 100]

Steps are kept small so every grid finishes in minutes; the numbers are
illustrative, not converged.
"""

import argparse
import tempfile

from sartm.ablate import GRIDS, ablate
from sartm.config import TrainConfig
from sartm.data import gen_embeddings, load_dataset, write_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--grid", choices=sorted(GRIDS), default="rank")
    ap.add_argument("--steps", type=int, default=100)
    args = ap.parse_args()
    root = tempfile.mkdtemp(prefix="sartm-ablate-")
    write_dataset(root, 96, seed=0)
    data = load_dataset(root)
    emb = gen_embeddings(data.class_names, 64, seed=0)
    table = ablate(TrainConfig(dataset=root), args.grid, data, emb, steps=args.steps)
    print(table.format())


if __name__ == "__main__":
    main()
