"""Hierarchical windowed-attention encoder with modality-specific LoRA adapters.

The base weights (patch embedding, position embeddings, attention and MLP
projections, patch merging) are shared by all modalities and frozen. Each
registered modality owns its own layer norms and a pair of low-rank adapters
on the query and value projections of every attention block.

Token grids are kept channels-last (``N×H×W×C``) inside the encoder; stage
outputs are returned channels-first (``N×C×H×W``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, GeometryError
from .tensor import Tensor

PATCH_SIZE = 4


def stage_stride(i):
    """Downsampling factor of stage ``i`` relative to the input."""
    return 2 ** (i + 2)


@dataclass
class EncoderConfig:
    in_channels: int = 3
    embed_dim: int = 32
    num_stages: int = 3
    window_size: int = 4
    num_heads: int = 2
    lora_rank: int = 4
    mlp_ratio: int = 2
    image_size: tuple = (64, 64)
    modalities: tuple = ("rgb", "thermal")
    global_last_stage: bool = True

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.modalities = tuple(self.modalities)
        if self.num_stages < 1:
            raise ConfigError("num_stages must be at least 1")
        if self.lora_rank < 1 or self.lora_rank > self.embed_dim // 2:
            raise ConfigError(
                f"lora_rank must lie in [1, embed_dim/2 = {self.embed_dim // 2}], got {self.lora_rank}"
            )
        for c in self.stage_dims:
            if c % self.num_heads:
                raise ConfigError(f"stage width {c} not divisible by num_heads={self.num_heads}")
        if len(set(self.modalities)) != len(self.modalities) or not self.modalities:
            raise ConfigError(f"modalities must be distinct and non-empty, got {self.modalities}")
        self.stage_sizes(*self.image_size)

    @property
    def stage_dims(self):
        return [self.embed_dim * 2**i for i in range(self.num_stages)]

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    def window_for(self, i):
        """Window edge for stage ``i``; ``None`` means global attention."""
        if self.global_last_stage and i == self.num_stages - 1:
            return None
        return self.window_size

    def stage_sizes(self, h, w):
        last = stage_stride(self.num_stages - 1)
        if h % last or w % last:
            raise GeometryError(f"input {h}x{w} not divisible by the deepest stride {last}")
        sizes = []
        for i in range(self.num_stages):
            s = stage_stride(i)
            hi, wi = h // s, w // s
            win = self.window_for(i)
            if win is not None and (hi % win or wi % win):
                raise GeometryError(f"stage {i} extent {hi}x{wi} not divisible by window {win}")
            sizes.append((hi, wi))
        return sizes


def patchify(x, p):
    """``N×C×H×W`` -> ``N×(H/p)×(W/p)×(C·p·p)`` non-overlapping patches."""
    n, c, h, w = x.shape
    if h % p or w % p:
        raise GeometryError(f"input {h}x{w} not divisible by patch size {p}")
    x = T.reshape(x, (n, c, h // p, p, w // p, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (n, h // p, w // p, c * p * p))


def patch_embed(image, weight, bias, patch=PATCH_SIZE):
    """Flatten each ``p×p`` patch and project it affinely to ``d`` channels.

    Accepts ``C×H×W`` or ``N×C×H×W``; returns the same layout with ``d`` channels
    at ``H/p × W/p``.
    """
    image = T.as_tensor(image)
    single = image.ndim == 3
    if single:
        image = T.reshape(image, (1,) + image.shape)
    tokens = T.matmul(patchify(image, patch), weight) + bias
    out = T.transpose(tokens, (0, 3, 1, 2))
    return T.reshape(out, out.shape[1:]) if single else out


def window_partition(x, win):
    n, h, w, c = x.shape
    x = T.reshape(x, (n, h // win, win, w // win, win, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n * (h // win) * (w // win), win * win, c))


def window_merge(x, win, n, h, w):
    c = x.shape[-1]
    x = T.reshape(x, (n, h // win, w // win, win, win, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n, h, w, c))


class LoraAdapter(nn.Module):
    """Low-rank update ``x @ W_a @ W_b`` added to a frozen projection."""

    def __init__(self, rng, dim, rank, target, modality):
        self.w_a = nn.uniform(rng, (dim, rank), 1.0 / np.sqrt(dim))
        self.w_b = nn.zeros((rank, dim))
        self._target = target
        self._modality = modality

    @property
    def target(self):
        return self._target

    @property
    def modality(self):
        return self._modality

    def delta(self, x):
        return T.matmul(T.matmul(x, self.w_a), self.w_b)


class AttentionWeights(nn.Module):
    """Frozen query/key/value/output projections of one attention layer."""

    def __init__(self, rng, dim, trainable=False):
        self.q = nn.Linear(rng, dim, dim, trainable=trainable)
        self.k = nn.Linear(rng, dim, dim, trainable=trainable)
        self.v = nn.Linear(rng, dim, dim, trainable=trainable)
        self.o = nn.Linear(rng, dim, dim, trainable=trainable)


def _split_heads(x, heads):
    b, t, c = x.shape
    x = T.reshape(x, (b, t, heads, c // heads))
    return T.transpose(x, (0, 2, 1, 3))


def _merge_heads(x):
    b, h, t, dk = x.shape
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b, t, h * dk))


def attention(q, k, v, heads):
    """Scaled dot-product attention on ``B×T×C`` inputs split into ``heads``."""
    q, k, v = (_split_heads(t, heads) for t in (q, k, v))
    dk = q.shape[-1]
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dk))
    return _merge_heads(T.matmul(T.softmax(scores, axis=-1), v))


def window_attention(x, base, lora=None, window=None, heads=1):
    """Multi-head self-attention restricted to non-overlapping windows.

    ``x`` is a channels-last grid ``N×H×W×C``. ``lora`` is an optional
    ``(query_adapter, value_adapter)`` pair; the key projection is never
    adapted. ``window=None`` attends over the whole grid.
    """
    n, h, w, c = x.shape
    if window is None:
        tokens = T.reshape(x, (n, h * w, c))
    else:
        if h % window or w % window:
            raise GeometryError(f"grid {h}x{w} not divisible by window {window}")
        tokens = window_partition(x, window)
    q = base.q(tokens)
    k = base.k(tokens)
    v = base.v(tokens)
    if lora is not None:
        lq, lv = lora
        q = q + lq.delta(tokens)
        v = v + lv.delta(tokens)
    out = base.o(attention(q, k, v, heads))
    if window is None:
        return T.reshape(out, (n, h, w, c))
    return window_merge(out, window, n, h, w)


class ModalityBlockParams(nn.Module):
    """Trainable per-modality parameters of one encoder block."""

    def __init__(self, rng, dim, rank, modality):
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.lora_q = LoraAdapter(rng, dim, rank, "query", modality)
        self.lora_v = LoraAdapter(rng, dim, rank, "value", modality)


@dataclass
class StageOutput:
    """Stage maps ``I_0 .. I_n``, each ``N×C_i×H_i×W_i``."""

    maps: list = field(default_factory=list)

    def __getitem__(self, i):
        return self.maps[i]

    def __len__(self):
        return len(self.maps)

    def __iter__(self):
        return iter(self.maps)


class HierarchicalEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, rng):
        self._config = config
        dims = config.stage_dims
        sizes = config.stage_sizes(*config.image_size)
        patch_in = config.in_channels * PATCH_SIZE * PATCH_SIZE
        self.patch_weight = nn.uniform(rng, (patch_in, dims[0]), np.sqrt(3.0 / patch_in), trainable=False)
        self.patch_bias = nn.zeros((dims[0],), trainable=False)
        self.pos_embed = [
            nn.param(0.02 * rng.standard_normal((h, w, c)), trainable=False) for (h, w), c in zip(sizes, dims)
        ]
        self.merges = [
            nn.Linear(rng, 4 * dims[i - 1], dims[i], trainable=False) for i in range(1, config.num_stages)
        ]
        self.attn = [AttentionWeights(rng, c) for c in dims]
        self.mlp = [nn.MLP(rng, c, config.mlp_ratio * c, trainable=False) for c in dims]
        self.adapters = {
            m: [ModalityBlockParams(rng, c, config.lora_rank, m) for c in dims] for m in config.modalities
        }

    @property
    def config(self):
        return self._config

    def lora_parameters(self, modality=None):
        out = {}
        for name, p in self.named_parameters():
            if ".lora_" in name and (modality is None or name.startswith(f"adapters.{modality}.")):
                out[name] = p
        return out

    def base_parameters(self):
        return {n: p for n, p in self.named_parameters() if not n.startswith("adapters.")}

    def _block(self, x, i, params, use_lora):
        cfg = self._config
        lora = (params.lora_q, params.lora_v) if use_lora else None
        h = params.norm1(x)
        x = x + window_attention(h, self.attn[i], lora, cfg.window_for(i), cfg.num_heads)
        return x + self.mlp[i](params.norm2(x))

    def encode(self, image, modality, use_lora=True):
        """Run all stages on ``image`` (``N×C×H×W``) for a registered modality."""
        cfg = self._config
        if modality not in self.adapters:
            raise ConfigError(f"modality {modality!r} is not registered (known: {list(self.adapters)})")
        image = T.as_tensor(image)
        if image.ndim == 3:
            image = T.reshape(image, (1,) + image.shape)
        n, c, h, w = image.shape
        if (h, w) != cfg.image_size:
            raise GeometryError(f"encoder built for {cfg.image_size}, got input {h}x{w}")
        if c != cfg.in_channels:
            if c != 1:
                raise ConfigError(f"expected {cfg.in_channels} or 1 input channels, got {c}")
            image = T.concat([image] * cfg.in_channels, axis=1)
        params = self.adapters[modality]
        x = T.matmul(patchify(image, PATCH_SIZE), self.patch_weight) + self.patch_bias
        maps = []
        for i in range(cfg.num_stages):
            if i > 0:
                x = self.merges[i - 1](merge_patches(x))
            x = x + self.pos_embed[i]
            x = self._block(x, i, params[i], use_lora)
            maps.append(T.transpose(x, (0, 3, 1, 2)))
        return StageOutput(maps)

    forward = encode


def merge_patches(x):
    """Concatenate each 2×2 neighbourhood: ``N×H×W×C`` -> ``N×H/2×W/2×4C``."""
    n, h, w, c = x.shape
    x = T.reshape(x, (n, h // 2, 2, w // 2, 2, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (n, h // 2, w // 2, 4 * c))
