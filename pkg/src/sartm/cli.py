"""Command-line entry point: ``sartm <command> ...``.

Exit codes: 0 success, 1 validation or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import NumericalError, SartmError

log = logging.getLogger("sartm")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


def _cmd_gen_data(args):
    from .data import write_dataset

    root = write_dataset(args.out, args.scenes, args.classes, seed=args.seed, num_val=args.val, size=args.size)
    print(f"wrote {args.scenes} scenes to {root}")
    return EXIT_OK


def _cmd_gen_embeddings(args):
    from .data import gen_embeddings, write_embeddings

    names = [ln.strip() for ln in Path(args.classes).read_text().splitlines() if ln.strip()]
    table = gen_embeddings(names, args.dim, seed=args.seed)
    write_embeddings(args.out, table)
    print(f"wrote {len(names)}x{args.dim} embeddings to {args.out}")
    return EXIT_OK


def _parse_overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_config(path, overrides):
    from .config import TrainConfig

    text = Path(path).read_text() if path else ""
    text += "".join(f"{k} = {v}\n" for k, v in overrides.items())
    return TrainConfig.from_text(text)


def _cmd_train(args):
    from .train import overfit_config, train

    cfg = _load_config(args.config, _parse_overrides(args.set))
    if args.overfit:
        cfg = overfit_config(cfg)
    if args.no_language:
        cfg = cfg.replace(w2=0.0, w3=0.0)
        log.warning("ablation --no-language: w2 = w3 = 0")
    if args.no_aux:
        cfg = cfg.replace(w1=0.0)
        log.warning("ablation --no-aux: w1 = 0")
    trainer, result = train(cfg, resume=args.resume)
    print(json.dumps({"step": trainer.step, **{k: v for k, v in result.metrics.items() if k[0] != "I"}}))
    return EXIT_OK


def _cmd_eval(args):
    from . import checkpoint as ck
    from .data import load_dataset
    from .metrics import evaluate
    from .model import SARTM

    manifest, arrays = ck.read_checkpoint(args.checkpoint)
    cfg = ck.checkpoint_config(args.checkpoint)
    emb = arrays["class_embeddings"]
    model = SARTM.from_config(cfg, emb)
    ck.load_checkpoint(args.checkpoint, model)
    data = load_dataset(args.data)
    idx = data.indices(args.split)
    preds = np.concatenate(
        [
            model.predict({"rgb": data.rgb[idx[s : s + 16]], "thermal": data.thermal[idx[s : s + 16]]}, args.head)
            for s in range(0, idx.size, 16)
        ]
    )
    report = evaluate(preds, data.labels[idx], model.num_classes)
    print(json.dumps({"checkpoint_step": manifest["step"], "split": args.split, **report.as_dict()}))
    return EXIT_OK


def _cmd_gradcheck(args):
    from .gradcheck import run_gradcheck

    report = run_gradcheck(seeds=args.seeds, end_to_end=not args.skip_end_to_end)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def _cmd_ablate(args):
    from .ablate import ablate

    cfg = _load_config(args.config, _parse_overrides(args.set))
    table = ablate(cfg, args.grid, steps=args.steps)
    print(table.format())
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors (1); argparse would otherwise exit 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser():
    from .ablate import GRIDS

    p = _Parser(prog="sartm", description="RGB-thermal segmentation with adapted frozen encoders.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a procedural RGB-thermal dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=360)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--val", type=int, default=None, help="validation scenes (default: scenes // 6)")
    g.add_argument("--size", type=int, default=64)
    g.set_defaults(func=_cmd_gen_data)

    e = sub.add_parser("gen-embeddings", help="write deterministic class embeddings")
    e.add_argument("--classes", required=True, help="file with one class name per line")
    e.add_argument("--dim", type=int, default=64)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=_cmd_gen_embeddings)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", default=None)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    ab = t.add_mutually_exclusive_group()
    ab.add_argument("--no-language", action="store_true", help="drop the distillation terms (w2 = w3 = 0)")
    ab.add_argument("--no-aux", action="store_true", help="drop the auxiliary head loss (w1 = 0)")
    t.add_argument("--overfit", action="store_true", help="memorise four training scenes")
    t.add_argument("--resume", default=None, help="checkpoint prefix to resume from")
    t.set_defaults(func=_cmd_train)

    v = sub.add_parser("eval", help="evaluate a checkpoint")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--split", default="val", choices=("train", "val"))
    v.add_argument("--head", default="main", choices=("main", "aux", "mean"))
    v.set_defaults(func=_cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--skip-end-to-end", action="store_true")
    c.set_defaults(func=_cmd_gradcheck)

    a = sub.add_parser("ablate", help="train every variant of an ablation grid")
    a.add_argument("--grid", required=True, choices=sorted(GRIDS))
    a.add_argument("--config", default=None)
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.add_argument("--steps", type=int, default=None, help="steps per variant (default: config steps)")
    a.set_defaults(func=_cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SartmError, FileNotFoundError, KeyError, ValueError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
