"""Ablation grids: one short training run per variant, tabulated.

Each grid is a list of :class:`Variant` (a label plus config overrides).
:func:`ablate` trains every variant from the same seed and renders the
results as a plain-text table whose rows follow the published layouts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .config import TrainConfig
from .train import Trainer, load_inputs

log = logging.getLogger(__name__)

RANKS = (4, 8, 16, 32, 64)
W1_SWEEP = (0.05, 0.03, 0.008, 0.004, 0.002)
W2_SWEEP = (10.0, 100.0, 1000.0, 10000.0, 100000.0)
W3_SWEEP = (1.0, 10.0, 50.0, 100.0, 1000.0)
AUX_HEADS = ("fpn", "deeplab", "segformer")


@dataclass(frozen=True)
class Variant:
    label: str
    overrides: dict = field(default_factory=dict)
    group: str = ""


def _rank_overrides(cfg, r):
    # adapters need r <= d/2; widen the encoder only when the rank demands it
    return {"lora_rank": r, "embed_dim": max(cfg.embed_dim, 2 * r)}


def rank_grid(cfg):
    return [Variant(str(r), _rank_overrides(cfg, r)) for r in RANKS]


def loss_grid(cfg):
    on = {"w0": cfg.w0, "w1": cfg.w1, "w2": cfg.w2, "w3": cfg.w3}
    rows = []
    for k in range(1, 5):
        ws = {f"w{i}": (on[f"w{i}"] if i < k else 0.0) for i in range(4)}
        rows.append(Variant("ce_main" if k == 1 else f"+{('ce_aux', 'cr', 'se')[k - 2]}", ws))
    return rows


def weights_grid(cfg):
    rows = []
    for name, sweep in (("w1", W1_SWEEP), ("w2", W2_SWEEP), ("w3", W3_SWEEP)):
        rows.extend(Variant(f"{name}={v:g}", {name: v}, group=name) for v in sweep)
    return rows


def aux_grid(cfg):
    return [Variant(h, {"aux_head": h}) for h in AUX_HEADS]


def components_grid(cfg):
    return [
        Variant("SARTM", {}),
        Variant("- without language", {"w2": 0.0, "w3": 0.0}),
        Variant("- without Aux_Seg_Head", {"w1": 0.0}),
    ]


GRIDS = {
    "rank": rank_grid,
    "loss": loss_grid,
    "weights": weights_grid,
    "aux": aux_grid,
    "components": components_grid,
}


@dataclass
class AblationResult:
    variant: Variant
    metrics: dict
    steps: int


@dataclass
class AblationTable:
    grid: str
    results: list

    def metric(self, i, key="mIoU"):
        return 100.0 * self.results[i].metrics[key]

    def format(self):
        return _FORMATTERS[self.grid](self)


def _pct(v):
    return f"{v:.2f}"


def _delta(v):
    return f"{v:+.2f}"


def _table(header, rows):
    cells = [header] + rows
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    line = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), rule] + [line(r) for r in rows])


def _format_rank(t):
    rows = [[r.variant.label, _pct(t.metric(i, "mAcc")), _pct(t.metric(i))] for i, r in enumerate(t.results)]
    return _table(["Rank size", "mAcc", "mIoU"], rows)


def _format_loss(t):
    header = ["L_CE(S0)", "L_CE(S1)", "L_cr", "L_se", "mIoU", "Δ", "F1", "Δ", "Acc", "Δ"]
    rows = []
    for i, _ in enumerate(t.results):
        marks = ["✓" if k <= i else "" for k in range(4)]
        row = marks
        for key in ("mIoU", "F1", "Acc"):
            v = t.metric(i, key)
            row += [_pct(v), _delta(v - t.metric(i - 1, key)) if i else ""]
        rows.append(row)
    return _table(header, rows)


def _format_weights(t):
    cols = {g: [(r.variant.overrides[g], t.metric(i)) for i, r in enumerate(t.results) if r.variant.group == g]
            for g in ("w1", "w2", "w3")}
    n = max(len(v) for v in cols.values())
    rows = []
    for k in range(n):
        row = []
        for g in ("w1", "w2", "w3"):
            w, m = cols[g][k] if k < len(cols[g]) else ("", None)
            row += [f"{w:g}" if w != "" else "", _pct(m) if m is not None else ""]
        rows.append(row)
    return _table(["w1", "mIoU", "w2", "mIoU", "w3", "mIoU"], rows)


def _format_aux(t):
    base = t.metric(0)
    rows = []
    for i, r in enumerate(t.results):
        v = t.metric(i)
        rows.append([r.variant.label, _pct(v) if i == 0 else f"{_pct(v)} ({_delta(v - base)})"])
    return _table(["Auxiliary Segmentation Head", "% mIoU (Change)"], rows)


def _format_components(t):
    base = t.metric(0)
    rows = []
    for i, r in enumerate(t.results):
        v = t.metric(i)
        rows.append([r.variant.label, _pct(v) if i == 0 else f"{_pct(v)} ({_delta(v - base)})"])
    return _table(["Structure", "synthetic mIoU"], rows)


_FORMATTERS = {
    "rank": _format_rank,
    "loss": _format_loss,
    "weights": _format_weights,
    "aux": _format_aux,
    "components": _format_components,
}


def run_variant(cfg: TrainConfig, variant: Variant, dataset, embeddings, steps=None):
    vcfg = cfg.replace(**variant.overrides)
    log.info("ablation variant %s: %s", variant.label, variant.overrides)
    trainer = Trainer(vcfg, dataset, embeddings)
    result = trainer.run(steps=steps if steps is not None else vcfg.steps)
    metrics = trainer.evaluate().as_dict() if not result.metrics else result.metrics
    return AblationResult(variant, metrics, trainer.step)


def ablate(cfg: TrainConfig, grid: str, dataset=None, embeddings=None, steps=None):
    """Train every variant of ``grid`` and return the filled table."""
    if grid not in GRIDS:
        raise KeyError(f"unknown grid {grid!r}; choose from {sorted(GRIDS)}")
    if dataset is None or embeddings is None:
        dataset, embeddings = load_inputs(cfg)
    results = [run_variant(cfg, v, dataset, embeddings, steps) for v in GRIDS[grid](cfg)]
    return AblationTable(grid, results)
