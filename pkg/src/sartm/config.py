"""Training configuration and its flat ``key = value`` text format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

# Fields that change how long or where a run goes, not what it computes.
RUN_ONLY_FIELDS = ("steps", "eval_every", "ckpt_every", "log_every", "output_dir", "early_stop_miou")


@dataclass
class TrainConfig:
    # data
    dataset: str = "data"
    embeddings: str = ""  # empty -> <dataset>/embeddings.bin
    output_dir: str = "runs/sartm"
    image_size: int = 64
    num_classes: int = 4
    train_limit: int = 0  # 0 = whole train split
    overfit: bool = False  # train and validate on the first 4 train scenes
    # encoder
    embed_dim: int = 32
    num_stages: int = 3
    window_size: int = 4
    num_heads: int = 2
    lora_rank: int = 4
    mlp_ratio: int = 2
    # pyramid / fusion / decoder
    fusion_layers: str = "0,1"
    text_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 2
    aux_head: str = "fpn"
    # objectives
    w0: float = 1.0
    w1: float = 0.008
    w2: float = 10000.0
    w3: float = 100.0
    ohem_thresh: float = 0.7
    tau: float = 0.07
    # optimisation
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    steps: int = 2000
    flip_prob: float = 0.5
    # bookkeeping
    seed: int = 0
    augment_seed: int = -1  # -1 -> derived from seed
    eval_every: int = 200
    ckpt_every: int = 500
    log_every: int = 1
    early_stop_miou: float = 0.0  # 0 disables

    def __post_init__(self):
        if self.embed_dim % 8:
            raise ConfigError(f"embed_dim must be divisible by 8, got {self.embed_dim}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if self.aux_head not in ("fpn", "deeplab", "segformer"):
            raise ConfigError(f"unknown aux_head {self.aux_head!r}")
        for k in ("w0", "w1", "w2", "w3"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be non-negative")

    @property
    def fusion_layer_set(self):
        return tuple(int(v) for v in self.fusion_layers.split(",") if v.strip())

    @property
    def embeddings_path(self):
        return self.embeddings or str(Path(self.dataset) / "embeddings.bin")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse(value, types[key], key)
        return cls(**values)

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())

    def identity_hash(self):
        """Hash of every field that affects the computation (run length excluded)."""
        text = "".join(
            f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self) if f.name not in RUN_ONLY_FIELDS
        )
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(value, typ, key):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from None
