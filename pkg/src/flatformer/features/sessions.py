"""Session segmentation and pairwise time lags."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DataError

#: Default session gap in minutes (10 hours).
DEFAULT_GAP_MINUTES = 600.0
#: Alternative commonly used for web-style sessionisation.
SHORT_GAP_MINUTES = 30.0


def _check_sorted(ts: np.ndarray) -> None:
    if ts.size > 1 and np.any(np.diff(ts) < 0):
        bad = int(np.argmax(np.diff(ts) < 0)) + 1
        raise DataError(f"timestamps decrease at position {bad}: {ts[bad - 1]} -> {ts[bad]}")


def derive_sessions(timestamps, gap: float = DEFAULT_GAP_MINUTES) -> tuple[np.ndarray, np.ndarray]:
    """Session id ``s`` (1-based) and within-session step ``tau`` (0-based).

    A new session opens whenever the gap to the previous interaction is
    strictly greater than ``gap``.  The first interaction always opens
    session 1, whatever the timestamp epoch.
    """
    if not gap > 0:
        raise ConfigError(f"session gap must be positive, got {gap}")
    ts = np.asarray(timestamps, dtype=np.float64)
    if ts.ndim != 1:
        raise DataError("timestamps must be one-dimensional")
    _check_sorted(ts)
    n = ts.size
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    starts = np.empty(n, dtype=bool)
    starts[0] = True
    starts[1:] = np.diff(ts) > gap
    sessions = np.cumsum(starts)
    start_idx = np.flatnonzero(starts)
    steps = np.arange(n) - start_idx[sessions - 1]
    return sessions.astype(np.int64), steps.astype(np.int64)


def time_lag_matrix(timestamps) -> tuple[np.ndarray, float]:
    """Lower-triangular lag matrix ``dT[t, j] = ts_t - ts_j`` and its scale.

    Entries above the diagonal are zero.  The scale is
    ``max(ts[-1] - ts[0], 1.0)``; the floor guards constant timestamps.
    """
    ts = np.asarray(timestamps, dtype=np.float64)
    _check_sorted(ts)
    if ts.size == 0:
        return np.zeros((0, 0)), 1.0
    lag = np.tril(ts[:, None] - ts[None, :])
    span = max(float(ts[-1] - ts[0]), 1.0)
    return lag, span


def _row_spans(ts: np.ndarray, causal: bool) -> np.ndarray:
    if causal:
        # per query row: only history up to t sets the scale
        return np.maximum(ts - ts[0], 1.0)[:, None]
    return np.full((ts.size, 1), max(float(ts[-1] - ts[0]), 1.0))


def normalized_lags(timestamps, causal: bool = False) -> np.ndarray:
    """Lags divided by the span, so every entry lies in [0, 1].

    The default scale is the whole sequence span.  ``causal=True`` divides
    row ``t`` by ``max(ts_t - ts_0, 1)`` instead, so no row depends on later
    timestamps.
    """
    lag, _ = time_lag_matrix(timestamps)
    if lag.size == 0:
        return lag
    ts = np.asarray(timestamps, dtype=np.float64)
    return lag / _row_spans(ts, causal)


def log_lag_matrix(timestamps, causal: bool = False) -> np.ndarray:
    """``ln(dT' + 1)`` on and below the diagonal, zero above."""
    return np.log1p(normalized_lags(timestamps, causal=causal))


def previous_step_log_lag(timestamps, causal: bool = False) -> np.ndarray:
    """``ln(dT'[t, t-1] + 1)`` per step, 0 at the first step."""
    ts = np.asarray(timestamps, dtype=np.float64)
    out = np.zeros(ts.size)
    if ts.size > 1:
        spans = _row_spans(ts, causal)[1:, 0]
        out[1:] = np.log1p(np.diff(ts) / spans)
    return out
