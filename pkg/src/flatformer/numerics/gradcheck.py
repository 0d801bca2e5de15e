"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], float], param: Tensor, h: float = 1e-5, max_entries: int | None = None,
                   rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Estimate d fn / d param by central differences.

    Returns ``(flat_indices, estimates)``.  When ``max_entries`` is given only
    a random subset of entries is probed.
    """
    flat = param.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
    est = np.empty(idx.size)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        est[k] = (fp - fm) / (2.0 * h)
    return idx, est


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Elementwise max of ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps near-zero gradients from turning finite-difference
    round-off (about 1e-11 at h=1e-5) into a spurious large ratio.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Compare backprop gradients with central differences for every parameter.

    ``loss_fn`` must rebuild the graph on every call and be deterministic.
    Returns the max relative error per parameter name.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in params.items()}

    def scalar() -> float:
        return loss_fn().item()

    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        idx, est = numerical_grad(scalar, p, h=h, max_entries=max_entries, rng=rng)
        errors[name] = relative_error(analytic[name].reshape(-1)[idx], est)
    return errors
