"""Optimizers: plain SGD (the default everywhere) and Adam (base pretraining only)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ShapeError, TrainingDivergenceError
from .matrix import Matrix


def sgd_step(params: Mapping[str, Matrix], grads: Mapping[str, np.ndarray], lr: float) -> dict[str, Matrix]:
    """p <- p - lr * g per named parameter; params without a grad pass through.

    Raises TrainingDivergenceError on any non-finite gradient.
    """
    updated: dict[str, Matrix] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"sgd_step: grad shape {g.shape} != param shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for {name!r}")
        new = (p.astype(np.float64) - lr * np.asarray(g, dtype=np.float64)).astype(np.float32)
        new.setflags(write=False)
        updated[name] = new
    return updated


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Matrix],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, Matrix]:
    """One Adam update; moments live in ``state`` and are mutated in place."""
    state.step += 1
    t = state.step
    updated: dict[str, Matrix] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for {name!r}")
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new = (p.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(np.float32)
        new.setflags(write=False)
        updated[name] = new
    return updated
