"""Deterministic Adam optimizer operating on Tensor gradient buffers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, TensorError


@dataclass
class AdamState:
    """First/second moment buffers for a fixed list of parameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        st = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        return st


def adam_step(params, state, maximize=False, nonfinite="reject", grad_clip=None):
    """One in-place Adam update over ``params`` using their ``.grad`` buffers.

    ``nonfinite`` selects the policy for NaN/Inf gradients: "reject" raises
    (training default), "clamp" zeroes non-finite entries and reports them
    (divergence studies need to keep going). Returns a list of event strings.
    Bit-deterministic given identical inputs.
    """
    if len(params) != len(state.m):
        raise TensorError(f"adam state built for {len(state.m)} params, got {len(params)}")
    events = []
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        if not isinstance(p, Tensor):
            raise TensorError("adam_step expects Tensor parameters")
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if p.data.shape != g.shape:
            raise TensorError(f"param {i}: grad shape {g.shape} != param shape {p.data.shape}")
        if not np.isfinite(g).all():
            if nonfinite == "reject":
                raise TensorError(f"non-finite gradient for parameter {i}")
            bad = ~np.isfinite(g)
            g = np.where(bad, 0.0, g).astype(np.float32)
            events.append(f"step {t}: clamped {int(bad.sum())} non-finite gradient entries in param {i}")
        if grad_clip is not None:
            norm = float(np.linalg.norm(g))
            if norm > grad_clip:
                g = g * np.float32(grad_clip / norm)
                events.append(f"step {t}: clipped gradient of param {i} ({norm:.3g} -> {grad_clip})")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        update = (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(np.float32)
        if maximize:
            p.data = p.data + update
        else:
            p.data = p.data - update
    return events
