"""Procedural RGB-thermal scenes, PPM/PGM raster I/O and teacher embedding fixtures.

Dataset layout on disk::

    root/rgb/<id>.ppm        P6, maxval 255
    root/thermal/<id>.pgm    P5, maxval 255
    root/labels/<id>.pgm     P5, class ids stored directly (255 = ignore)
    root/classes.txt         one class name per line
    root/splits/train.txt    one scene id per line
    root/splits/val.txt
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, RasterFormatError
from .losses import IGNORE_INDEX

DEFAULT_CLASSES = ("background", "car", "person", "bike", "curve", "car_stop", "cone", "bump",
                   "road", "sky", "tree", "building", "pole", "sign", "truck", "bus")
SHAPES = ("rectangle", "ellipse", "polyline")


@dataclass(frozen=True)
class SceneSpec:
    num_classes: int = 4
    height: int = 64
    width: int = 64
    class_names: tuple = ()
    thermal_means: tuple = ()
    thermal_std: float = 0.03
    rgb_noise: float = 0.03
    night_rgb_noise: float = 0.02
    night_level: float = 0.08
    thermal_noise: float = 0.02
    night_fraction: float = 0.5
    min_objects: int = 2
    max_objects: int = 5
    min_size: int = 14
    max_size: int = 30
    border: int = 1
    shapes: tuple = SHAPES

    def __post_init__(self):
        if not 2 <= self.num_classes <= 16:
            raise ConfigError(f"num_classes must be in [2, 16], got {self.num_classes}")
        if not self.class_names:
            object.__setattr__(self, "class_names", DEFAULT_CLASSES[: self.num_classes])
        if len(self.class_names) != self.num_classes:
            raise ConfigError("class_names length must equal num_classes")
        if not self.thermal_means:
            means = tuple(float(v) for v in np.linspace(0.15, 0.9, self.num_classes))
            object.__setattr__(self, "thermal_means", means)
        if len(self.thermal_means) != self.num_classes:
            raise ConfigError("thermal_means length must equal num_classes")
        bad = set(self.shapes) - set(SHAPES)
        if bad:
            raise ConfigError(f"unknown shapes {sorted(bad)}")

    def class_colors(self):
        """Fixed, well-separated RGB colour per class (hue wheel, background grey)."""
        colors = [(0.45, 0.45, 0.45)]
        for k in range(1, self.num_classes):
            hue = (k - 1) / max(self.num_classes - 1, 1)
            colors.append(tuple(0.5 + 0.4 * np.cos(2 * np.pi * (hue + np.array([0, 1, 2]) / 3))))
        return np.array(colors)


@dataclass
class ModalitySample:
    rgb: np.ndarray  # 3×H×W float32 in [0, 1]
    thermal: np.ndarray  # 1×H×W float32 in [0, 1]
    label: np.ndarray  # H×W uint8
    seed: int = 0
    condition: str = "day"


def _quantize(x):
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def _shape_mask(kind, rng, h, w, size_lo, size_hi):
    yy, xx = np.mgrid[0:h, 0:w]
    sh = int(rng.integers(size_lo, size_hi + 1))
    sw = int(rng.integers(size_lo, size_hi + 1))
    top = int(rng.integers(-sh // 4, h - 3 * sh // 4))
    left = int(rng.integers(-sw // 4, w - 3 * sw // 4))
    if kind == "rectangle":
        return (yy >= top) & (yy < top + sh) & (xx >= left) & (xx < left + sw)
    if kind == "ellipse":
        # integer arithmetic: (2y+1-2cy)^2 * sw^2 + (2x+1-2cx)^2 * sh^2 <= sh^2 * sw^2
        cy2, cx2 = 2 * top + sh, 2 * left + sw
        dy, dx = 2 * yy + 1 - cy2, 2 * xx + 1 - cx2
        return dy * dy * sw * sw + dx * dx * sh * sh <= sh * sh * sw * sw
    # polyline: three vertices, thick stroke, squared integer distances
    pts = [(int(rng.integers(0, h)), int(rng.integers(0, w))) for _ in range(3)]
    half = max(size_lo // 4, 3)
    mask = np.zeros((h, w), dtype=bool)
    for (y0, x0), (y1, x1) in zip(pts[:-1], pts[1:]):
        vy, vx = y1 - y0, x1 - x0
        den = vy * vy + vx * vx
        py, px = yy - y0, xx - x0
        if den == 0:
            d2 = (py * py + px * px) * 1.0
        else:
            t = np.clip((py * vy + px * vx) / den, 0.0, 1.0)
            d2 = (py - t * vy) ** 2 + (px - t * vx) ** 2
        mask |= d2 <= half * half
    return mask


def _border_band(label, width):
    """Mark pixels within ``width`` of a class boundary as ignored."""
    if width <= 0:
        return label
    edge = np.zeros(label.shape, dtype=bool)
    diff_v = label[1:, :] != label[:-1, :]
    diff_h = label[:, 1:] != label[:, :-1]
    edge[1:, :] |= diff_v
    edge[:-1, :] |= diff_v
    edge[:, 1:] |= diff_h
    edge[:, :-1] |= diff_h
    grown = edge.copy()
    for _ in range(width - 1):
        g = grown.copy()
        g[1:, :] |= grown[:-1, :]
        g[:-1, :] |= grown[1:, :]
        g[:, 1:] |= grown[:, :-1]
        g[:, :-1] |= grown[:, 1:]
        grown = g
    out = label.copy()
    out[grown] = IGNORE_INDEX
    return out


def _streams(seed):
    ss = np.random.SeedSequence(seed)
    layout, rgb, thermal, cond = ss.spawn(4)
    return tuple(np.random.Generator(np.random.PCG64(s)) for s in (layout, rgb, thermal, cond))


def generate_scene(spec: SceneSpec, seed, condition=None):
    """Deterministic scene for ``(spec, seed)``.

    Layout, RGB noise, thermal noise and the day/night draw use independent
    streams, so forcing ``condition`` changes only the RGB raster.
    """
    rng_layout, rng_rgb, rng_thermal, rng_cond = _streams(seed)
    if condition is None:
        condition = "night" if rng_cond.random() < spec.night_fraction else "day"
    if condition not in ("day", "night"):
        raise ConfigError(f"condition must be 'day' or 'night', got {condition!r}")
    h, w = spec.height, spec.width
    label = np.zeros((h, w), dtype=np.uint8)
    n_obj = int(rng_layout.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(n_obj):
        cls = int(rng_layout.integers(1, spec.num_classes))
        kind = spec.shapes[int(rng_layout.integers(0, len(spec.shapes)))]
        label[_shape_mask(kind, rng_layout, h, w, spec.min_size, spec.max_size)] = cls

    colors = spec.class_colors()
    rgb = colors[label].transpose(2, 0, 1) + spec.rgb_noise * rng_rgb.standard_normal((3, h, w))
    if condition == "night":
        rgb = spec.night_level * rgb + spec.night_rgb_noise * rng_rgb.standard_normal((3, h, w))
    tmeans = np.asarray(spec.thermal_means)
    obj_offset = spec.thermal_std * rng_thermal.standard_normal(spec.num_classes)
    thermal = tmeans[label] + obj_offset[label] + spec.thermal_noise * rng_thermal.standard_normal((h, w))

    return ModalitySample(
        rgb=_quantize(rgb).astype(np.float32) / 255.0,
        thermal=_quantize(thermal)[None].astype(np.float32) / 255.0,
        label=_border_band(label, spec.border),
        seed=seed,
        condition=condition,
    )


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

_WS = b" \t\n\r\x0b\x0c"


def encode_raster(array):
    """Bytes of a binary PGM (``H×W``) or PPM (``H×W×3``) with maxval 255."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise ValueError(f"rasters must be uint8, got {a.dtype}")
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected H×W or H×W×3 raster, got shape {a.shape}")
    h, w = a.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(a).tobytes()


def decode_raster(buf):
    """Parse PGM/PPM bytes; raises :class:`RasterFormatError` with the byte offset."""
    buf = bytes(buf)
    pos = 0
    fields, starts = [], []

    def skip_ws(p):
        while p < len(buf):
            if buf[p] in _WS:
                p += 1
            elif buf[p : p + 1] == b"#":
                while p < len(buf) and buf[p : p + 1] != b"\n":
                    p += 1
            else:
                break
        return p

    if buf[:2] not in (b"P5", b"P6"):
        raise RasterFormatError(f"bad magic {buf[:2]!r}, expected b'P5' or b'P6'", 0)
    magic = buf[:2]
    pos = 2
    for what in ("width", "height", "maxval"):
        if pos >= len(buf) or buf[pos] not in _WS and buf[pos : pos + 1] != b"#":
            raise RasterFormatError(f"expected whitespace before {what}", pos)
        pos = skip_ws(pos)
        m = re.compile(rb"\d+").match(buf, pos)
        if not m:
            raise RasterFormatError(f"expected decimal {what}", pos)
        fields.append(int(m.group()))
        starts.append(pos)
        pos = m.end()
    if pos >= len(buf) or buf[pos] not in _WS:
        raise RasterFormatError("expected single whitespace after maxval", pos)
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise RasterFormatError(f"only maxval 255 is supported, got {maxval}", starts[2])
    if w <= 0 or h <= 0:
        raise RasterFormatError(f"non-positive extent {w}x{h}", starts[0])
    ch = 3 if magic == b"P6" else 1
    expected = w * h * ch
    actual = len(buf) - pos
    if actual != expected:
        raise RasterFormatError(f"payload length mismatch: expected {expected} bytes, got {actual}", pos)
    data = np.frombuffer(buf, dtype=np.uint8, count=expected, offset=pos)
    return data.reshape((h, w, 3) if ch == 3 else (h, w)).copy()


def write_raster(path, array):
    Path(path).write_bytes(encode_raster(array))


def read_raster(path):
    return decode_raster(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# teacher embeddings
# ---------------------------------------------------------------------------


@dataclass
class ClassEmbeddingTable:
    names: list
    vectors: np.ndarray  # C×e float32, unit rows

    @property
    def shape(self):
        return self.vectors.shape


def gen_embeddings(class_names, dim, seed=0):
    """Unit-norm vector per class from a keyed BLAKE2b hash of the name bytes."""
    names = list(class_names)
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ConfigError(f"duplicate class names: {dupes}")
    if dim < 1:
        raise ConfigError(f"embedding dim must be positive, got {dim}")
    rows = []
    for name in names:
        digest = hashlib.blake2b(name.encode("utf-8"), digest_size=16, key=struct.pack("<Q", seed)).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
        v = rng.standard_normal(dim)
        rows.append(v / np.linalg.norm(v))
    return ClassEmbeddingTable(names, np.asarray(rows, dtype=np.float32))


EMB_MAGIC = "SARTM-EMB v1"


def write_embeddings(path, table):
    c, e = table.vectors.shape
    header = f"{EMB_MAGIC} {c} {e}\n".encode("ascii")
    Path(path).write_bytes(header + table.vectors.astype("<f4").tobytes())


def read_embeddings(path, names=None):
    buf = Path(path).read_bytes()
    nl = buf.find(b"\n")
    if nl < 0:
        raise RasterFormatError("embeddings header has no newline", 0)
    parts = buf[:nl].decode("ascii", errors="replace").split()
    if len(parts) != 4 or " ".join(parts[:2]) != EMB_MAGIC:
        raise RasterFormatError(f"bad embeddings header {buf[:nl]!r}", 0)
    c, e = int(parts[2]), int(parts[3])
    payload = buf[nl + 1 :]
    if len(payload) != 4 * c * e:
        raise RasterFormatError(f"payload length mismatch: expected {4 * c * e} bytes, got {len(payload)}", nl + 1)
    vectors = np.frombuffer(payload, dtype="<f4").reshape(c, e).astype(np.float32)
    return ClassEmbeddingTable(list(names) if names else [str(i) for i in range(c)], vectors)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    class_names: list
    ids: list
    rgb: np.ndarray  # N×3×H×W float32
    thermal: np.ndarray  # N×1×H×W float32
    labels: np.ndarray  # N×H×W uint8
    splits: dict = field(default_factory=dict)

    def indices(self, split):
        pos = {sid: i for i, sid in enumerate(self.ids)}
        return np.array([pos[s] for s in self.splits[split]], dtype=np.int64)

    @property
    def num_classes(self):
        return len(self.class_names)


def write_sample(root, scene_id, sample):
    root = Path(root)
    write_raster(root / "rgb" / f"{scene_id}.ppm", _quantize(sample.rgb.transpose(1, 2, 0)))
    write_raster(root / "thermal" / f"{scene_id}.pgm", _quantize(sample.thermal[0]))
    write_raster(root / "labels" / f"{scene_id}.pgm", sample.label)


def scene_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def write_dataset(root, num_scenes, num_classes=4, seed=0, num_val=None, spec=None, size=64):
    """Generate ``num_scenes`` scenes; the last ``num_val`` (default N/6) form the val split."""
    root = Path(root)
    spec = spec or SceneSpec(num_classes=num_classes, height=size, width=size)
    num_val = num_scenes // 6 if num_val is None else num_val
    if not 0 <= num_val <= num_scenes:
        raise ConfigError(f"num_val={num_val} outside [0, {num_scenes}]")
    for sub in ("rgb", "thermal", "labels", "splits"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    ids = [f"scene_{i:05d}" for i in range(num_scenes)]
    for i, sid in enumerate(ids):
        write_sample(root, sid, generate_scene(spec, scene_seed(seed, i)))
    (root / "classes.txt").write_text("\n".join(spec.class_names) + "\n")
    n_train = num_scenes - num_val
    (root / "splits" / "train.txt").write_text("".join(f"{s}\n" for s in ids[:n_train]))
    (root / "splits" / "val.txt").write_text("".join(f"{s}\n" for s in ids[n_train:]))
    return root


def _lines(path):
    return [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]


def dataset_paths(root):
    root = Path(root)
    return [root / "classes.txt", root / "splits" / "train.txt", root / "splits" / "val.txt"]


def load_dataset(root):
    root = Path(root)
    missing = [str(p) for p in dataset_paths(root) if not p.exists()]
    if missing:
        raise FileNotFoundError(f"dataset incomplete, missing: {', '.join(missing)}")
    names = _lines(root / "classes.txt")
    splits = {s: _lines(root / "splits" / f"{s}.txt") for s in ("train", "val")}
    ids = list(dict.fromkeys(splits["train"] + splits["val"]))
    rgb, th, lab = [], [], []
    for sid in ids:
        rgb.append(read_raster(root / "rgb" / f"{sid}.ppm").transpose(2, 0, 1))
        th.append(read_raster(root / "thermal" / f"{sid}.pgm")[None])
        lab.append(read_raster(root / "labels" / f"{sid}.pgm"))
    return Dataset(
        class_names=names,
        ids=ids,
        rgb=np.stack(rgb).astype(np.float32) / 255.0,
        thermal=np.stack(th).astype(np.float32) / 255.0,
        labels=np.stack(lab),
        splits=splits,
    )


def samples_to_dataset(samples, class_names, num_val=0):
    ids = [f"scene_{i:05d}" for i in range(len(samples))]
    n_train = len(samples) - num_val
    return Dataset(
        class_names=list(class_names),
        ids=ids,
        rgb=np.stack([s.rgb for s in samples]),
        thermal=np.stack([s.thermal for s in samples]),
        labels=np.stack([s.label for s in samples]),
        splits={"train": ids[:n_train], "val": ids[n_train:]},
    )

