"""Additive attention-logit biases: forgetting, causal and key-padding masks.

All of these depend only on the input timestamps and lengths, so they are
built once per batch before the encoder runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from ..numerics.tensor import MASK_VALUE


def forgetting_bias(lags: np.ndarray, span: float, beta) -> np.ndarray:
    """``-beta * ln(lags / span + 1)`` on and below the diagonal, 0 above.

    ``beta`` may be a scalar or a vector of per-head rates, in which case the
    result gains a leading head axis.
    """
    lags = np.asarray(lags, dtype=np.float64)
    if np.any(np.tril(lags) < 0):
        raise DataError("forgetting_bias: negative time lag")
    if not span > 0:
        raise DataError(f"forgetting_bias: span must be positive, got {span}")
    log_term = np.tril(np.log1p(lags / span))
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim == 0:
        return -float(beta) * log_term
    return -beta[:, None, None] * log_term[None]


def causal_mask(length: int) -> np.ndarray:
    """0 on and below the diagonal, the mask sentinel above it."""
    return np.triu(np.full((length, length), MASK_VALUE), k=1)


def key_padding_bias(valid: np.ndarray) -> np.ndarray:
    """``[B, 1, 1, L]`` bias that masks padded keys."""
    return np.where(valid, 0.0, MASK_VALUE)[:, None, None, :]


@dataclass
class BiasMasks:
    """Per-batch logit biases.

    ``static`` is ``[B, 1, L, L]`` and already contains the causal mask, the
    key-padding mask and (for a global rate) the forgetting bias, so the
    attention hot loop performs a single addition.  ``log_lag`` is kept for
    learnable per-head rates, which must rebuild the bias in-graph.
    """

    forget: np.ndarray
    causal: np.ndarray
    padding: np.ndarray
    static: np.ndarray
    log_lag: np.ndarray


def build_masks(log_lag: np.ndarray, valid: np.ndarray, beta: float, dtype=np.float64) -> BiasMasks:
    """Combine the batch's ``ln(lag'+1)`` matrices with causal/padding masks."""
    B, L, _ = log_lag.shape
    forget = -beta * log_lag if beta else np.zeros_like(log_lag)
    causal = causal_mask(L)
    padding = np.where(valid, 0.0, MASK_VALUE)
    static = (causal[None] + forget + padding[:, None, :])[:, None].astype(dtype, copy=False)
    return BiasMasks(forget=forget, causal=causal, padding=padding, static=static,
                     log_lag=log_lag[:, None].astype(dtype, copy=False))


def multi_rate_ladder(n_heads: int, start: float = 0.0125, cap: float = 0.4) -> np.ndarray:
    """Geometric per-head initial rates ``start * 2**i`` capped at ``cap``."""
    return np.minimum(start * 2.0 ** np.arange(n_heads), cap)
