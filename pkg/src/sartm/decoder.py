"""Main query decoder and the auxiliary FPN-style segmentation head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .encoder import attention
from .errors import ConfigError, FusionError
from .pyramid import pyramid_channels


@dataclass
class SegLogits:
    main: T.Tensor
    aux: T.Tensor


def _factor(fine, coarse):
    hf, wf = fine.shape[-2:]
    hc, wc = coarse.shape[-2:]
    if hf % hc or wf % wc or hf // hc != wf // wc:
        raise FusionError(f"cannot upsample {hc}x{wc} onto {hf}x{wf}")
    return hf // hc


class CrossAttentionLayer(nn.Module):
    def __init__(self, rng, d, heads, mlp_ratio=2):
        self.norm_q = nn.LayerNorm(d)
        self.norm_kv = nn.LayerNorm(d)
        self.q = nn.Linear(rng, d, d)
        self.k = nn.Linear(rng, d, d)
        self.v = nn.Linear(rng, d, d)
        self.o = nn.Linear(rng, d, d)
        self.norm_mlp = nn.LayerNorm(d)
        self.mlp = nn.MLP(rng, d, mlp_ratio * d)
        self._heads = heads

    def forward(self, queries, tokens):
        kv = self.norm_kv(tokens)
        h = self.norm_q(queries)
        queries = queries + self.o(attention(self.q(h), self.k(kv), self.v(kv), self._heads))
        return queries + self.mlp(self.norm_mlp(queries))


class MaskDecoder(nn.Module):
    """``f_dec``: learned class queries cross-attend to SFM tokens.

    Low-resolution logits are dot products between decoded queries and
    projected tokens; they are then refined twice by bilinear ×2 upsampling
    plus a 1×1 skip projection of the IFP and the FFP.
    """

    def __init__(self, rng, d, num_classes, depth=2, heads=2):
        if d % heads:
            raise ConfigError(f"decoder width {d} not divisible by heads={heads}")
        ch = pyramid_channels(d)
        self.queries = nn.param(0.02 * rng.standard_normal((num_classes, d)))
        self.layers = [CrossAttentionLayer(rng, d, heads) for _ in range(depth)]
        self.token_proj = nn.Linear(rng, d, d)
        self.skip1 = nn.Conv2d(rng, ch["ifp"], num_classes, 1)
        self.skip0 = nn.Conv2d(rng, ch["ffp"], num_classes, 1)
        self._num_classes = num_classes

    def low_res(self, sfm):
        n, d, h, w = sfm.shape
        tokens = T.transpose(T.reshape(sfm, (n, d, h * w)), (0, 2, 1))
        q = self.queries + T.Tensor(np.zeros((n, 1, 1), dtype=sfm.dtype))
        for layer in self.layers:
            q = layer(q, tokens)
        logits = T.matmul(q, T.swapaxes(self.token_proj(tokens), -1, -2)) * (1.0 / np.sqrt(d))
        return T.reshape(logits, (n, self._num_classes, h, w))

    def forward(self, pyramid):
        if pyramid.ifp.shape[1] != self.skip1.weight.shape[1] or pyramid.ffp.shape[1] != self.skip0.weight.shape[1]:
            raise ConfigError(
                f"skip convs expect {self.skip1.weight.shape[1]}/{self.skip0.weight.shape[1]} channels, "
                f"got {pyramid.ifp.shape[1]}/{pyramid.ffp.shape[1]}"
            )
        s_low = self.low_res(pyramid.sfm)
        s_inter = T.bilinear_upsample(s_low, _factor(pyramid.ifp, s_low)) + self.skip1(pyramid.ifp)
        return T.bilinear_upsample(s_inter, _factor(pyramid.ffp, s_inter)) + self.skip0(pyramid.ffp)


def decode_main(pyramid, decoder):
    return decoder(pyramid)


class FPNHead(nn.Module):
    """Auxiliary head: align SFM and IFP to ``d/8`` channels, sum coarse-to-fine, 3×3 conv."""

    def __init__(self, rng, d, num_classes):
        ch = pyramid_channels(d)
        self.align_sfm = nn.Conv2d(rng, ch["sfm"], ch["ffp"], 1)
        self.align_ifp = nn.Conv2d(rng, ch["ifp"], ch["ffp"], 1)
        self.head = nn.Conv2d(rng, ch["ffp"], num_classes, 3, pad=1)

    def merge(self, pyramid):
        """The pre-convolution map ``up(F_1 + up(F_n)) + F_0`` after alignment."""
        sfm = self.align_sfm(pyramid.sfm)
        ifp = self.align_ifp(pyramid.ifp)
        inter = ifp + T.bilinear_upsample(sfm, _factor(ifp, sfm))
        return T.bilinear_upsample(inter, _factor(pyramid.ffp, inter)) + pyramid.ffp

    def forward(self, pyramid):
        out = self.head(self.merge(pyramid))
        return T.bilinear_upsample(out, _factor(pyramid.ffp, out))


class SegFormerHead(nn.Module):
    """All-MLP variant: project every level to ``d/8``, upsample, concatenate, fuse."""

    def __init__(self, rng, d, num_classes):
        ch = pyramid_channels(d)
        e = ch["ffp"]
        self.proj = {lvl: nn.Conv2d(rng, c, e, 1) for lvl, c in ch.items()}
        self.fuse = nn.Conv2d(rng, 3 * e, e, 1)
        self.cls = nn.Conv2d(rng, e, num_classes, 1)

    def forward(self, pyramid):
        target = pyramid.ffp
        maps = []
        for lvl in ("ffp", "ifp", "sfm"):
            m = self.proj[lvl](pyramid.level(lvl))
            maps.append(T.bilinear_upsample(m, _factor(target, m)))
        return self.cls(T.relu(self.fuse(T.concat(maps, axis=1))))


class DeepLabHead(nn.Module):
    """ASPP-lite on the SFM (1×1, 3×3 and image-pooling branches) with an FFP skip."""

    def __init__(self, rng, d, num_classes):
        ch = pyramid_channels(d)
        e = ch["ffp"]
        self.branch1 = nn.Conv2d(rng, d, e, 1)
        self.branch3 = nn.Conv2d(rng, d, e, 3, pad=1)
        self.pool_proj = nn.Linear(rng, d, e)
        self.project = nn.Conv2d(rng, 3 * e, e, 1)
        self.head = nn.Conv2d(rng, 2 * e, num_classes, 3, pad=1)

    def forward(self, pyramid):
        sfm = pyramid.sfm
        n, _, h, w = sfm.shape
        pooled = self.pool_proj(T.mean(sfm, axis=(2, 3)))
        pooled = T.reshape(pooled, pooled.shape + (1, 1)) + np.zeros((1, 1, h, w), dtype=sfm.dtype)
        aspp = T.relu(self.project(T.concat([self.branch1(sfm), self.branch3(sfm), pooled], axis=1)))
        up = T.bilinear_upsample(aspp, _factor(pyramid.ffp, aspp))
        return self.head(T.concat([up, pyramid.ffp], axis=1))


AUX_HEADS = {"fpn": FPNHead, "deeplab": DeepLabHead, "segformer": SegFormerHead}


def build_aux_head(kind, rng, d, num_classes):
    try:
        cls = AUX_HEADS[kind]
    except KeyError:
        raise ConfigError(f"unknown auxiliary head {kind!r}; choose from {sorted(AUX_HEADS)}") from None
    return cls(rng, d, num_classes)


def decode_aux(pyramid, head):
    return head(pyramid)
