"""Training objectives: OHEM cross-entropy, L_cr, self-similarity distillation, composite."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, LossWarning, ShapeError

IGNORE_INDEX = 255


@dataclass
class LossWeights:
    w0: float = 1.0
    w1: float = 0.008
    w2: float = 10000.0
    w3: float = 100.0

    def __post_init__(self):
        for k in ("w0", "w1", "w2", "w3"):
            if getattr(self, k) < 0:
                raise ConfigError(f"loss weight {k} must be non-negative, got {getattr(self, k)}")


def _zero(like):
    return T.Tensor(np.zeros((), dtype=like.dtype))


def _batched(logits, labels):
    logits = T.as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim == 3:
        logits = T.reshape(logits, (1,) + logits.shape)
    if labels.ndim == 2:
        labels = labels[None]
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ShapeError(f"logits {logits.shape} do not match labels {labels.shape}")
    return logits, labels.astype(np.int64, copy=False)


def ohem_select(ce, prob, thresh=0.7):
    """Indices (into ``ce``) of the pixels that enter the OHEM mean.

    Hard pixels have true-class probability below ``thresh``; at least
    ``max(1, n // 16)`` pixels are kept. Pixels are ranked by CE descending,
    ties by position ascending.
    """
    n = ce.size
    n_hard = int(np.count_nonzero(prob < thresh))
    n_min = max(n_hard, max(1, n // 16))
    order = np.lexsort((np.arange(n), -ce))
    return order[:n_min]


def ohem_ce(logits, labels, thresh=0.7, ignore_index=IGNORE_INDEX):
    """Online-hard-example-mined cross-entropy.

    Computed per image over its non-ignored pixels and averaged over images
    that have any valid pixel. Returns zero with a :class:`LossWarning` if all
    pixels are ignored.
    """
    logits, labels = _batched(logits, labels)
    n, c, h, w = logits.shape
    logp = T.log_softmax(logits, axis=1)
    flat = logp.data.reshape(-1)
    picks, weights = [], []
    for b in range(n):
        lab = labels[b].reshape(-1)
        valid = np.flatnonzero(lab != ignore_index)
        if valid.size == 0:
            continue
        if lab[valid].min() < 0 or lab[valid].max() >= c:
            raise ShapeError(f"labels must lie in [0, {c}) or equal {ignore_index}")
        idx = (b * c + lab[valid]) * (h * w) + valid
        lp = flat[idx]
        chosen = idx[ohem_select(-lp, np.exp(lp), thresh)]
        picks.append(chosen)
        weights.append(np.full(chosen.size, 1.0 / chosen.size))
    if not picks:
        warnings.warn("ohem_ce: every pixel is ignored; loss is zero", LossWarning, stacklevel=2)
        return _zero(logits)
    wts = np.concatenate(weights).astype(logits.dtype) / len(picks)
    return -T.sum(T.take(logp, np.concatenate(picks)) * wts)


def nearest_resize(labels, size):
    """Nearest-neighbour resampling of an integer label map to ``size`` (centre sampling)."""
    labels = np.asarray(labels)
    h, w = labels.shape[-2:]
    th, tw = size
    if (h, w) == (th, tw):
        return labels
    rows = np.minimum(((np.arange(th) + 0.5) * h / th).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(tw) + 0.5) * w / tw).astype(np.int64), w - 1)
    return labels[..., rows[:, None], cols[None, :]]


def _pixels(f, labels):
    """Flatten ``N×d×H×W`` features to ``P×d`` and resample labels to match."""
    f = T.as_tensor(f)
    if f.ndim == 3:
        f = T.reshape(f, (1,) + f.shape)
    n, d, h, w = f.shape
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if labels.shape[0] != n:
        raise ShapeError(f"features batch {n} != labels batch {labels.shape[0]}")
    y = nearest_resize(labels, (h, w)).reshape(-1).astype(np.int64)
    fp = T.reshape(T.transpose(f, (0, 2, 3, 1)), (n * h * w, d))
    return fp, y


def mask_average_pool(f, labels, num_classes, ignore_index=IGNORE_INDEX):
    """Per-class mean feature vectors under the label mask.

    Returns ``(prototypes, present)``: a ``K×d`` tensor (zero rows for absent
    classes) and a boolean presence mask.
    """
    fp, y = _pixels(f, labels)
    onehot = (y[None, :] == np.arange(num_classes)[:, None]) & (y[None, :] != ignore_index)
    counts = onehot.sum(axis=1)
    present = counts > 0
    weights = onehot / np.maximum(counts, 1)[:, None]
    return T.matmul(weights.astype(fp.dtype), fp), present


def l_cr(f, labels, classifier, ignore_index=IGNORE_INDEX):
    """KL(one-hot(y) || softmax(f @ classifier)) averaged over valid pixels (= pixel CE)."""
    fp, y = _pixels(f, labels)
    num_classes = classifier.shape[1]
    valid = np.flatnonzero(y != ignore_index)
    if valid.size == 0:
        warnings.warn("l_cr: every pixel is ignored; loss is zero", LossWarning, stacklevel=2)
        return _zero(fp)
    logp = T.log_softmax(T.matmul(fp, classifier), axis=1)
    idx = valid * num_classes + y[valid]
    return -T.mean(T.take(logp, idx))


def l_se(prototypes, present, teacher, tau=0.07):
    """Self-similarity distillation between class prototypes and teacher embeddings.

    Both cosine matrices are restricted to present classes and row-softmaxed at
    temperature ``tau``; the loss is the mean row KL(teacher || student).
    Fewer than two present classes yields zero with a :class:`LossWarning`.
    """
    idx = np.flatnonzero(np.asarray(present))
    prototypes = T.as_tensor(prototypes)
    if idx.size < 2:
        warnings.warn("l_se: fewer than two classes present; loss is zero", LossWarning, stacklevel=2)
        return _zero(prototypes)
    teacher = np.asarray(T.as_tensor(teacher).data, dtype=np.float64)[idx]
    tn = teacher / np.linalg.norm(teacher, axis=1, keepdims=True)
    t_logits = (tn @ tn.T) / tau
    t_logits -= t_logits.max(axis=1, keepdims=True)
    target = np.exp(t_logits)
    target = (target / target.sum(axis=1, keepdims=True)).astype(prototypes.dtype)
    student = T.cosine_similarity(T.getitem(prototypes, idx)) * (1.0 / tau)
    return T.kl_div(target, T.log_softmax(student, axis=1))


TERMS = ("ce_main", "ce_aux", "cr", "se")


def total_loss(
    s_main,
    s_aux,
    labels,
    features,
    teacher,
    classifier,
    weights=None,
    thresh=0.7,
    tau=0.07,
    ignore_index=IGNORE_INDEX,
):
    """Weighted sum ``w0·CE(S0) + w1·CE(S1) + w2·L_cr + w3·L_se``.

    Returns ``(total, breakdown)``. ``breakdown`` holds raw term values, the
    weighted contributions under ``weighted_<term>``, the total, and any
    warnings raised by the terms. Terms with zero weight are evaluated without
    recording a graph.
    """
    weights = weights or LossWeights()
    num_classes = classifier.shape[1]
    w = dict(zip(TERMS, (weights.w0, weights.w1, weights.w2, weights.w3)))

    def terms():
        yield "ce_main", lambda: ohem_ce(s_main, labels, thresh, ignore_index)
        yield "ce_aux", lambda: ohem_ce(s_aux, labels, thresh, ignore_index)
        yield "cr", lambda: l_cr(features, labels, classifier, ignore_index)

        def se():
            protos, present = mask_average_pool(features, labels, num_classes, ignore_index)
            return l_se(protos, present, teacher, tau)

        yield "se", se

    breakdown, total = {}, None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", LossWarning)
        for name, fn in terms():
            if w[name] == 0:
                with T.no_grad():
                    value = fn()
            else:
                value = fn()
                contrib = value * w[name]
                total = contrib if total is None else total + contrib
            breakdown[name] = float(value.data)
            breakdown[f"weighted_{name}"] = w[name] * float(value.data)
    if total is None:
        total = T.Tensor(np.zeros((), dtype=T.as_tensor(s_main).dtype))
    breakdown["total"] = float(total.data)
    breakdown["warnings"] = [str(c.message) for c in caught if issubclass(c.category, LossWarning)]
    return total, breakdown
