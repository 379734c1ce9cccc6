"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericalError


def adamw_step(params, grads, state, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """One AdamW update on plain arrays.

    ``params``/``grads`` map names to arrays; ``state`` holds ``t`` plus per-name
    ``m``/``v`` dicts and is updated in place. Returns the new parameter dict.
    Any non-finite gradient aborts the whole step before anything changes.
    """
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ContractError(f"{name}: grad shape {np.shape(g)} != param shape {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
    t = state.get("t", 0) + 1
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = m_all.get(name)
        v = v_all.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_all[name], v_all[name] = m, v
        p = p * (1.0 - lr * wd)
        out[name] = (p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)
    state["t"] = t
    return out


class AdamW:
    """Optimizer over a dict of named trainable tensors."""

    def __init__(self, params, lr=1e-4, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        frozen = [n for n, p in params.items() if not p.requires_grad]
        if frozen:
            raise ContractError(f"frozen parameters passed to optimizer: {frozen}")
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = {"t": 0, "m": {}, "v": {}}

    @property
    def step_count(self):
        return self.state["t"]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        new = adamw_step(
            {n: p.data for n, p in self.params.items()},
            grads,
            self.state,
            self.lr,
            self.weight_decay,
            *self.betas,
            eps=self.eps,
        )
        for n, p in self.params.items():
            p.data = new[n]
