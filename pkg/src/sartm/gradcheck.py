"""Finite-difference verification of every differentiable operator.

Each entry in :data:`CASES` builds a small double-precision problem: a
closure producing a tensor and the list of tensors to differentiate with
respect to. The checker contracts the output with fixed random weights,
runs :func:`~sartm.tensor.backward`, and compares against central
differences element by element. The end-to-end check perturbs every
trainable parameter tensor of a tiny model along a random direction.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .decoder import FPNHead, MaskDecoder
from .encoder import AttentionWeights, EncoderConfig, LoraAdapter, patch_embed, window_attention
from .errors import LossWarning
from .losses import LossWeights, l_cr, l_se, mask_average_pool, ohem_ce
from .pyramid import FeaturePyramid, ModalityFusion, lateral, reduce_channels, topdown_fuse
from .tensor import Tensor

H = 1e-3
TOL = 1e-3
SEEDS = 5

CASES = {}


def case(name):
    def register(fn):
        CASES[name] = fn
        return fn

    return register


def _leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def _u(rng, *shape, lo=-1.0, hi=1.0):
    return _leaf(rng.uniform(lo, hi, size=shape))


def _away_from_zero(rng, *shape, gap=0.05):
    x = rng.uniform(-1, 1, size=shape)
    return _leaf(np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x))


# -- primitives --------------------------------------------------------------


@case("add")
def _(rng):
    a, b = _u(rng, 3, 4), _u(rng, 4)
    return (lambda: a + b), [a, b]


@case("sub")
def _(rng):
    a, b = _u(rng, 3, 1), _u(rng, 3, 4)
    return (lambda: a - b), [a, b]


@case("mul")
def _(rng):
    a, b = _u(rng, 2, 3, 4), _u(rng, 3, 1)
    return (lambda: a * b), [a, b]


@case("div")
def _(rng):
    a, b = _u(rng, 3, 4), _u(rng, 3, 4, lo=0.5, hi=1.5)
    return (lambda: a / b), [a, b]


@case("neg")
def _(rng):
    a = _u(rng, 5)
    return (lambda: -a), [a]


@case("exp")
def _(rng):
    a = _u(rng, 2, 5)
    return (lambda: T.exp(a)), [a]


@case("log")
def _(rng):
    a = _u(rng, 2, 5, lo=0.5, hi=1.5)
    return (lambda: T.log(a)), [a]


@case("relu")
def _(rng):
    a = _away_from_zero(rng, 3, 5)
    return (lambda: T.relu(a)), [a]


@case("gelu")
def _(rng):
    a = _u(rng, 3, 5)
    return (lambda: T.gelu(a)), [a]


@case("matmul")
def _(rng):
    a, b = _u(rng, 2, 3, 4), _u(rng, 4, 5)
    return (lambda: a @ b), [a, b]


@case("sum")
def _(rng):
    a = _u(rng, 2, 3, 4)
    return (lambda: T.sum(a, axis=(0, 2))), [a]


@case("mean")
def _(rng):
    a = _u(rng, 2, 3, 4)
    return (lambda: T.mean(a, axis=1, keepdims=True)), [a]


@case("reshape")
def _(rng):
    a = _u(rng, 2, 6)
    return (lambda: T.reshape(a, (3, 4))), [a]


@case("transpose")
def _(rng):
    a = _u(rng, 2, 3, 4)
    return (lambda: T.transpose(a, (2, 0, 1))), [a]


@case("concat")
def _(rng):
    a, b = _u(rng, 2, 3), _u(rng, 2, 2)
    return (lambda: T.concat([a, b], axis=1)), [a, b]


@case("getitem")
def _(rng):
    a = _u(rng, 4, 5)
    return (lambda: a[np.array([0, 2, 2]), 1:4]), [a]


@case("take")
def _(rng):
    a = _u(rng, 3, 4)
    return (lambda: T.take(a, np.array([1, 5, 5, 11]))), [a]


@case("layer_norm")
def _(rng):
    x, w, b = _u(rng, 3, 6), _u(rng, 6), _u(rng, 6)
    return (lambda: T.layer_norm(x, w, b)), [x, w, b]


@case("softmax")
def _(rng):
    a = _u(rng, 3, 5)
    return (lambda: T.softmax(a, axis=-1)), [a]


@case("log_softmax")
def _(rng):
    a = _u(rng, 3, 5)
    return (lambda: T.log_softmax(a, axis=0)), [a]


@case("cosine_similarity")
def _(rng):
    a = _u(rng, 4, 6)
    return (lambda: T.cosine_similarity(a)), [a]


@case("kl_div")
def _(rng):
    p = _leaf(np.exp(-rng.uniform(0.5, 1.5, (3, 4))))
    q = _u(rng, 3, 4)
    return (lambda: T.kl_div(p, T.log_softmax(q, axis=-1))), [p, q]


@case("conv2d")
def _(rng):
    x = _u(rng, 2, 2, 4, 4)
    w3, b3 = _u(rng, 3, 2, 3, 3), _u(rng, 3)
    w1 = _u(rng, 2, 3, 1, 1)
    x2, w2 = _u(rng, 1, 2, 5, 5), _u(rng, 2, 2, 3, 3)

    def fn():
        y = T.conv2d(x, w3, b3, stride=1, pad=1)
        y = T.conv2d(y, w1)
        return T.concat([T.reshape(y, (-1,)), T.reshape(T.conv2d(x2, w2, stride=2, pad=1), (-1,))], axis=0)

    return fn, [x, w3, b3, w1, x2, w2]


@case("bilinear_upsample")
def _(rng):
    a = _u(rng, 2, 3, 3)
    return (lambda: T.bilinear_upsample(a, 2)), [a]


# -- composite operators -----------------------------------------------------


def _unfreeze(module):
    ps = module.parameters()
    for p in ps:
        p.requires_grad = True
    return ps


@case("patch_embed")
def _(rng):
    x, w, b = _u(rng, 2, 8, 8), _u(rng, 32, 3), _u(rng, 3)
    return (lambda: patch_embed(x, w, b)), [x, w, b]


@case("window_attention")
def _(rng):
    d = 4
    x = _u(rng, 1, 4, 4, d)
    base = AttentionWeights(rng, d)
    lq = LoraAdapter(rng, d, 2, "query", "rgb")
    lv = LoraAdapter(rng, d, 2, "value", "rgb")
    for ad in (lq, lv):
        ad.w_b.data = rng.uniform(-1, 1, ad.w_b.shape)
    params = [x] + _unfreeze(base) + lq.parameters() + lv.parameters()
    return (lambda: window_attention(x, base, (lq, lv), window=2, heads=2)), params


@case("lateral")
def _(rng):
    conv = nn.Conv2d(rng, 6, 8, 1)
    x = _u(rng, 1, 6, 4, 4)
    return (lambda: lateral(x, conv)), [x] + conv.parameters()


@case("topdown_fuse")
def _(rng):
    z = [_u(rng, 1, 2, 4, 4), _u(rng, 1, 2, 2, 2), _u(rng, 1, 2, 1, 1)]

    def fn():
        f = topdown_fuse(z, (0, 1))
        return T.concat([T.reshape(m, (-1,)) for m in f], axis=0)

    return fn, z


@case("reduce_channels")
def _(rng):
    f0, f1 = _u(rng, 1, 8, 4, 4), _u(rng, 1, 8, 2, 2)
    c0, c1 = nn.Conv2d(rng, 8, 1, 1), nn.Conv2d(rng, 8, 2, 1)

    def fn():
        a, b = reduce_channels(f0, f1, c0, c1)
        return T.concat([T.reshape(a, (-1,)), T.reshape(b, (-1,))], axis=0)

    return fn, [f0, f1] + c0.parameters() + c1.parameters()


def _pyramid(rng, d=16, n=1, h0=4):
    return FeaturePyramid(
        ffp=_u(rng, n, d // 8, h0, h0), ifp=_u(rng, n, d // 4, h0 // 2, h0 // 2), sfm=_u(rng, n, d, h0 // 4, h0 // 4)
    )


def _pyr_leaves(p):
    return [p.ffp, p.ifp, p.sfm]


@case("fuse_modalities")
def _(rng):
    d = 8
    pyrs = [_pyramid(rng, d, 2), _pyramid(rng, d, 2)]
    fusion = ModalityFusion(rng, d, 2, 5)
    for g in fusion.gate_logits.values():
        g.data = rng.uniform(-1, 1, g.shape)
    emb = Tensor(rng.standard_normal((3, 5)))

    def fn():
        out = fusion(pyrs, emb)
        return T.concat([T.reshape(getattr(out, k), (-1,)) for k in ("ffp", "ifp", "sfm")], axis=0)

    return fn, sum((_pyr_leaves(p) for p in pyrs), []) + fusion.parameters()


@case("decode_main")
def _(rng):
    pyr = _pyramid(rng, 16, 1, 8)
    dec = MaskDecoder(rng, 16, 3, depth=1, heads=2)
    return (lambda: dec(pyr)), _pyr_leaves(pyr) + dec.parameters()


@case("decode_aux")
def _(rng):
    pyr = _pyramid(rng, 16, 1, 8)
    head = FPNHead(rng, 16, 3)
    return (lambda: head(pyr)), _pyr_leaves(pyr) + head.parameters()


def _labels(rng, shape, classes, ignore_frac=0.2):
    y = rng.integers(0, classes, size=shape)
    y[rng.random(shape) < ignore_frac] = 255
    return y


@case("ohem_ce")
def _(rng):
    x = _u(rng, 2, 3, 4, 4)
    y = _labels(rng, (2, 4, 4), 3)
    return (lambda: ohem_ce(x, y)), [x]


@case("mask_average_pool")
def _(rng):
    f = _u(rng, 1, 3, 4, 4)
    y = _labels(rng, (1, 8, 8), 3)
    return (lambda: mask_average_pool(f, y, 3)[0]), [f]


@case("l_cr")
def _(rng):
    f, w = _u(rng, 2, 4, 2, 2), _u(rng, 4, 3)
    y = _labels(rng, (2, 4, 4), 3)
    return (lambda: l_cr(f, y, w)), [f, w]


@case("l_se")
def _(rng):
    protos = _u(rng, 4, 5)
    teacher = rng.standard_normal((4, 5))
    present = np.array([True, True, False, True])
    return (lambda: l_se(protos, present, teacher, tau=0.5)), [protos]


# -- checking ----------------------------------------------------------------


def relative_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    passed: bool
    detail: str = ""


def _contract(out, weights):
    return T.sum(out * weights)


def check_case(name, seed, h=H, tol=TOL):
    """Elementwise central-difference check of one registered case."""
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64), warnings.catch_warnings():
        warnings.simplefilter("ignore", LossWarning)
        fn, params = CASES[name](rng)
        for p in params:
            p.data = np.array(p.data, dtype=np.float64)
            p.requires_grad = True
            p.grad = None
        out = fn()
        weights = rng.uniform(-1, 1, size=out.shape)
        T.backward(_contract(out, weights))
        analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

        def value():
            with T.no_grad():
                return float(np.sum(fn().data * weights))

        numeric = []
        for p in params:
            num = np.zeros(p.shape)
            flat = p.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                up = value()
                flat[j] = orig - h
                down = value()
                flat[j] = orig
                num.reshape(-1)[j] = (up - down) / (2 * h)
            numeric.append(num)
    # one error over the whole gradient vector: some blocks (e.g. the key bias
    # under softmax) are exactly zero, so per-block ratios would be roundoff/roundoff
    err = relative_error(_flat(analytic), _flat(numeric))
    return CheckResult(name, seed, err, err < tol)


def _flat(arrays):
    return np.concatenate([np.ravel(a) for a in arrays])


def tiny_model(rng, num_classes=3):
    """Double-precision model on 16×16 inputs with every parameter randomised."""
    from .model import SARTM

    with T.default_dtype(np.float64):
        enc = EncoderConfig(embed_dim=16, num_stages=3, window_size=2, num_heads=2, lora_rank=2, image_size=(16, 16))
        emb = rng.standard_normal((num_classes, 8))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        model = SARTM(enc, num_classes, emb, rng, decoder_depth=1)
    for _, p in model.named_parameters():
        if p.requires_grad:
            p.data = p.data + 0.3 * rng.uniform(-1, 1, p.shape)
    return model


def check_end_to_end(seed, h=H, tol=TOL, weights=None):
    """Directional finite differences of the composite loss for every trainable tensor."""
    rng = np.random.default_rng(1000 + seed)
    model = tiny_model(rng)
    inputs = {"rgb": rng.uniform(0, 1, (2, 3, 16, 16)), "thermal": rng.uniform(0, 1, (2, 1, 16, 16))}
    labels = _labels(rng, (2, 16, 16), model.num_classes, 0.1).astype(np.int64)
    weights = weights or LossWeights(w0=1.0, w1=0.5, w2=0.7, w3=0.3)

    # threshold 1 keeps every valid pixel in the hard set, so the selection is
    # locally constant; at 0.7 pixels near the cut flip under perturbation
    def loss():
        return model.loss(model(inputs), labels, weights, thresh=1.0)[0]

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LossWarning)
        model.zero_grad()
        T.backward(loss())
        results = []
        for name, p in model.trainable_parameters().items():
            direction = rng.standard_normal(p.shape)
            direction /= np.linalg.norm(direction)  # step length h regardless of tensor size
            analytic = float(np.sum((np.zeros(p.shape) if p.grad is None else p.grad) * direction))
            orig = p.data.copy()
            with T.no_grad():
                p.data = orig + h * direction
                up = float(loss().data)
                p.data = orig - h * direction
                down = float(loss().data)
            p.data = orig
            numeric = (up - down) / (2 * h)
            err = relative_error(analytic, numeric)
            results.append(CheckResult(f"end_to_end:{name}", seed, err, err < tol))
    return results


@dataclass
class GradcheckReport:
    registered: list
    checked: list
    results: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def failures(self):
        return [r for r in self.results if not r.passed]

    @property
    def passed(self):
        return not self.failures and set(self.registered) <= set(self.checked)

    def worst(self):
        by_op = {}
        for r in self.results:
            key = r.name.split(":")[0]
            if key not in by_op or r.error > by_op[key].error:
                by_op[key] = r
        return by_op

    def format(self):
        lines = []
        for key, r in sorted(self.worst().items()):
            lines.append(f"{'PASS' if r.passed else 'FAIL'} {key:<20} max rel err {r.error:.2e}")
        for r in self.failures:
            lines.append(f"  failed: {r.name} (seed {r.seed}) rel err {r.error:.2e}")
        missing = sorted(set(self.registered) - set(self.checked))
        if missing:
            lines.append(f"unchecked registered ops: {missing}")
        lines.append(
            f"{len(self.checked)} ops checked / {len(self.registered)} registered, "
            f"{len(self.results)} checks, {self.seconds:.1f}s: {'OK' if self.passed else 'FAILED'}"
        )
        return "\n".join(lines)


def registered_ops():
    """Primitive ops plus the composite operators with their own cases."""
    return sorted(set(T.OPS) | set(CASES))


def run_gradcheck(seeds=SEEDS, ops=None, end_to_end=True, h=H, tol=TOL):
    start = time.perf_counter()
    names = sorted(CASES) if ops is None else list(ops)
    results = [check_case(n, s, h, tol) for n in names for s in range(seeds)]
    checked = list(names)
    if end_to_end:
        for s in range(seeds):
            results.extend(check_end_to_end(s, h, tol))
        checked.append("end_to_end")
    return GradcheckReport(
        registered=registered_ops() + (["end_to_end"] if end_to_end else []),
        checked=checked,
        results=results,
        seconds=time.perf_counter() - start,
    )
