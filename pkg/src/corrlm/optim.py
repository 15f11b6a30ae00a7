"""Adam with decoupled weight decay, global-norm clipping, and a finite-difference oracle."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-6
    step_count: int = 0
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def ensure(self, params: "OrderedDict[str, Tensor]") -> None:
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)


def clip_grad_norm(grads: Iterable[np.ndarray], max_norm: float) -> float:
    """Scale all grads in place by max_norm/total if the global L2 norm exceeds max_norm.

    Returns the pre-clip total norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    grads = list(grads)
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def adam_step(params: "OrderedDict[str, Tensor]", state: AdamState, lr: float,
              weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update over every parameter with a gradient.

    Weight decay is decoupled (applied directly to the parameter, scaled by lr)
    and only touches matrices (ndim >= 2), never biases or layer-norm gains.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    state.ensure(params)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        if weight_decay > 0.0 and p.data.ndim >= 2:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * update


def zero_grads(params: "OrderedDict[str, Tensor]") -> None:
    for p in params.values():
        p.grad = None


def grad_check(loss_fn: Callable[[], Tensor], params: "OrderedDict[str, Tensor]",
               epsilon: float = 1e-4, rng: np.random.Generator | None = None,
               coords_per_param: int = 4) -> float:
    """Max relative error between autodiff and central finite differences.

    ``loss_fn`` must be a deterministic pure function of ``params`` (any
    sampling frozen before the call). A sampled subset of coordinates per
    parameter is probed; the relative error is
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    zero_grads(params)
    base = loss_fn()
    base_val = base.item()
    again = loss_fn().item()
    if again != base_val:
        raise RuntimeError("loss_fn is not deterministic under frozen inputs")
    base.backward()
    worst = 0.0
    for name, p in params.items():
        g_ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        g_flat = g_ad.reshape(-1)
        n = flat.size
        k = min(coords_per_param, n)
        coords = rng.choice(n, size=k, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            f_plus = loss_fn().item()
            flat[c] = orig - epsilon
            f_minus = loss_fn().item()
            flat[c] = orig
            g_fd = (f_plus - f_minus) / (2.0 * epsilon)
            denom = max(1e-8, abs(g_flat[c]) + abs(g_fd))
            rel = abs(g_flat[c] - g_fd) / denom
            if rel > worst:
                worst = rel
    return worst
