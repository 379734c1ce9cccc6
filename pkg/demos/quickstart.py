"""Generate a small RGB-thermal dataset, train for a few hundred steps, evaluate.

    python3 demos/quickstart.py [--steps 300] [--out /tmp/sartm-demo]
"""

import argparse
import tempfile
from pathlib import Path

from sartm.config import TrainConfig
from sartm.data import gen_embeddings, load_dataset, write_dataset
from sartm.train import Trainer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--scenes", type=int, default=120)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    root = Path(args.out or tempfile.mkdtemp(prefix="sartm-demo-"))
    write_dataset(root, args.scenes, seed=0)
    data = load_dataset(root)
    emb = gen_embeddings(data.class_names, 64, seed=0)
    print(f"{len(data.splits['train'])} train / {len(data.splits['val'])} val scenes in {root}")

    cfg = TrainConfig(dataset=str(root), steps=args.steps, eval_every=100)
    trainer = Trainer(cfg, data, emb, log_path=root / "log.csv")
    n_train = sum(p.size for p in trainer.model.trainable_parameters().values())
    n_frozen = sum(p.size for p in trainer.model.frozen_parameters().values())
    print(f"trainable {n_train:,} / frozen {n_frozen:,} parameters")

    result = trainer.run()
    for row in result.rows:
        if row["val_miou"]:
            print(f"step {row['step']:5d}  loss {row['total']:9.4f}  val mIoU {float(row['val_miou']):.4f}")

    report = trainer.evaluate()
    print("per-class IoU:", " ".join(f"{n}={v:.3f}" for n, v in zip(data.class_names, report.iou)))
    print(f"mIoU {report.miou:.4f}  mAcc {report.macc:.4f}  F1 {report.mf1:.4f}")


if __name__ == "__main__":
    main()
