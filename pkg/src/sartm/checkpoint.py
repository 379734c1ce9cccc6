"""Checkpoints: a JSON manifest beside a raw little-endian float32 payload.

``<prefix>.json`` records the config (text and identity hash), step, a metric
snapshot and an index of named arrays with shapes and element offsets.
``<prefix>.bin`` holds the arrays back to back. Optimizer moments are stored
as ``adam.m/<name>`` and ``adam.v/<name>`` entries.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .errors import ConfigError

FORMAT = "sartm-ckpt v1"


def _paths(prefix):
    prefix = Path(prefix)
    if prefix.suffix in (".json", ".bin"):
        prefix = prefix.with_suffix("")
    return prefix.with_suffix(".json"), prefix.with_suffix(".bin")


def save_checkpoint(prefix, model, config, step, optimizer=None, metrics=None):
    manifest_path, payload_path = _paths(prefix)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    arrays = [(name, p.data) for name, p in model.named_parameters()]
    if optimizer is not None:
        for name in optimizer.params:
            m = optimizer.state["m"].get(name)
            if m is not None:
                arrays.append((f"adam.m/{name}", m))
                arrays.append((f"adam.v/{name}", optimizer.state["v"][name]))
    index, chunks, offset = [], [], 0
    for name, a in arrays:
        a = np.ascontiguousarray(a, dtype="<f4")
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.size
    manifest = {
        "format": FORMAT,
        "config_hash": config.identity_hash(),
        "config": config.to_text(),
        "step": int(step),
        "optimizer_step": optimizer.step_count if optimizer is not None else 0,
        "metrics": metrics or {},
        "params": index,
    }
    payload_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path


def read_checkpoint(prefix):
    """Return ``(manifest, {name: float32 array})``."""
    manifest_path, payload_path = _paths(prefix)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ConfigError(f"{manifest_path}: unknown checkpoint format {manifest.get('format')!r}")
    payload = np.frombuffer(payload_path.read_bytes(), dtype="<f4")
    arrays = {}
    for entry in manifest["params"]:
        start = entry["offset"]
        chunk = payload[start : start + entry["count"]]
        if chunk.size != entry["count"]:
            raise ConfigError(f"{payload_path}: truncated payload at {entry['name']}")
        arrays[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float32)
    return manifest, arrays


def checkpoint_config(prefix):
    manifest, _ = read_checkpoint(prefix)
    return TrainConfig.from_text(manifest["config"])


def load_checkpoint(prefix, model, optimizer=None, config=None):
    """Restore parameters (and optimizer state) in place; returns the manifest.

    With ``config`` given, its identity hash must match the checkpoint's.
    """
    manifest, arrays = read_checkpoint(prefix)
    if config is not None and config.identity_hash() != manifest["config_hash"]:
        raise ConfigError(
            f"config hash {config.identity_hash()} does not match checkpoint hash {manifest['config_hash']}"
        )
    for name, p in model.named_parameters():
        if name not in arrays:
            raise ConfigError(f"checkpoint lacks parameter {name!r}")
        if tuple(arrays[name].shape) != p.shape:
            raise ConfigError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {p.shape}")
        p.data = arrays[name].astype(p.dtype)
    if optimizer is not None:
        optimizer.state = {"t": manifest.get("optimizer_step", 0), "m": {}, "v": {}}
        for name in optimizer.params:
            if f"adam.m/{name}" in arrays:
                optimizer.state["m"][name] = arrays[f"adam.m/{name}"]
                optimizer.state["v"][name] = arrays[f"adam.v/{name}"]
    return manifest
