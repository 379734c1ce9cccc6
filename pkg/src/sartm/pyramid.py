"""Per-modality feature pyramids and their language-conditioned fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError, FusionError

LEVELS = ("ffp", "ifp", "sfm")


@dataclass
class FeaturePyramid:
    """FFP (``d/8`` ch, stage 0), IFP (``d/4`` ch, stage 1) and SFM (``d`` ch, deepest)."""

    ffp: T.Tensor
    ifp: T.Tensor
    sfm: T.Tensor

    def level(self, name):
        return getattr(self, name)

    def as_dict(self):
        return {k: getattr(self, k) for k in LEVELS}


def lateral(stage_map, conv):
    """1×1 projection of a stage map to the pyramid width."""
    return conv(stage_map)


def topdown_fuse(z, fusion_layers):
    """Top-down pass: ``F_i = (Z_i + up(F_{i+1})) / 2`` for ``i`` in the fusion set.

    ``z`` lists the lateral maps from finest to deepest; each deeper map has half
    the spatial extent of the one above it.
    """
    n = len(z) - 1
    layers = set(fusion_layers)
    if any(i < 0 or i >= n for i in layers):
        raise ContractError(f"fusion layers must lie in [0, {n - 1}], got {sorted(layers)}")
    f = [None] * (n + 1)
    f[n] = z[n]
    for i in range(n - 1, -1, -1):
        if i in layers:
            factor = z[i].shape[-1] // f[i + 1].shape[-1]
            f[i] = (z[i] + T.bilinear_upsample(f[i + 1], factor)) * 0.5
        else:
            f[i] = z[i]
    return f


def reduce_channels(f0, f1, conv0, conv1):
    """Project the stage-0 and stage-1 maps to ``d/8`` and ``d/4`` channels."""
    return conv0(f0), conv1(f1)


def pyramid_channels(d):
    if d % 8:
        raise ConfigError(f"pyramid width d={d} must be divisible by 8")
    return {"ffp": d // 8, "ifp": d // 4, "sfm": d}


class ModalityFPN(nn.Module):
    """Lateral convs, top-down fusion and channel reduction for one modality."""

    def __init__(self, rng, stage_dims, d, fusion_layers=(0, 1)):
        if len(stage_dims) < 2:
            raise ConfigError("a feature pyramid needs at least two encoder stages")
        ch = pyramid_channels(d)
        self.lateral = [nn.Conv2d(rng, c, d, 1) for c in stage_dims]
        self.reduce0 = nn.Conv2d(rng, d, ch["ffp"], 1)
        self.reduce1 = nn.Conv2d(rng, d, ch["ifp"], 1)
        self._fusion_layers = tuple(fusion_layers)

    def forward(self, stages):
        z = [lateral(m, conv) for m, conv in zip(stages, self.lateral)]
        f = topdown_fuse(z, self._fusion_layers)
        ffp, ifp = reduce_channels(f[0], f[1], self.reduce0, self.reduce1)
        return FeaturePyramid(ffp=ffp, ifp=ifp, sfm=f[-1])


@dataclass
class FusedPyramid(FeaturePyramid):
    """Unified pyramid plus the intermediate fusion products, kept for inspection."""

    gates: dict = None
    averaged: dict = None
    weighted: dict = None


class ModalityFusion(nn.Module):
    """Softmax-gated weighted average across modalities, then a 1×1 refinement.

    Gate logits per level are a learned bias per modality plus a language term
    ``<mean(T_e) @ P_t, GAP(F_i^m)>``.
    """

    def __init__(self, rng, d, num_modalities, text_dim):
        ch = pyramid_channels(d)
        self._num_modalities = num_modalities
        self.gate_logits = {lvl: nn.zeros((num_modalities,)) for lvl in LEVELS}
        self.text_proj = {
            lvl: nn.uniform(rng, (text_dim, ch[lvl]), 1.0 / np.sqrt(text_dim * ch[lvl])) for lvl in LEVELS
        }
        self.refine = {lvl: nn.Conv2d(rng, ch[lvl], ch[lvl], 1) for lvl in LEVELS}

    def gate_weights(self, maps, level, text_mean):
        """Per-sample modality weights (``N×M``) for one level."""
        logits = []
        for m, fm in enumerate(maps):
            pooled = T.mean(fm, axis=(2, 3))
            logit = T.reshape(self.gate_logits[level][m : m + 1], (1, 1))
            if text_mean is not None:
                query = T.matmul(text_mean, self.text_proj[level])
                logit = logit + T.matmul(pooled, T.reshape(query, (-1, 1)))
            else:
                logit = logit + np.zeros((fm.shape[0], 1), dtype=fm.dtype)
            logits.append(logit)
        return T.softmax(T.concat(logits, axis=1), axis=1)

    def forward(self, pyramids, class_embeddings=None):
        if len(pyramids) != self._num_modalities:
            raise FusionError(f"expected {self._num_modalities} modalities, got {len(pyramids)}")
        text_mean = None
        if class_embeddings is not None:
            text_mean = T.mean(T.as_tensor(class_embeddings), axis=0, keepdims=True)
        out, gates, averaged, weighted = {}, {}, {}, {}
        for lvl in LEVELS:
            maps = [p.level(lvl) for p in pyramids]
            shapes = {m.shape for m in maps}
            if len(shapes) != 1:
                raise FusionError(f"{lvl}: modality maps disagree in shape: {sorted(shapes)}")
            alpha = self.gate_weights(maps, lvl, text_mean)
            parts = []
            for m, fm in enumerate(maps):
                a = T.reshape(alpha[:, m : m + 1], (-1, 1, 1, 1))
                parts.append(fm * a)
            avg = parts[0]
            for p in parts[1:]:
                avg = avg + p
            gates[lvl], weighted[lvl], averaged[lvl] = alpha, parts, avg
            out[lvl] = self.refine[lvl](avg)
        return FusedPyramid(**out, gates=gates, averaged=averaged, weighted=weighted)


def fuse_modalities(pyramids, class_embeddings, fusion):
    return fusion(pyramids, class_embeddings)
