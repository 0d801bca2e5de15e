"""Inference latency benchmarking and attention-map export."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..features.sequences import AugmentedSequence, augment, make_batch
from ..features.sessions import time_lag_matrix
from ..numerics.tensor import no_grad


def synthetic_batch(n_exercises: int, batch: int = 64, length: int = 200, seed: int = 0):
    """Fixed random batch of full-length sequences with mixed short/long gaps."""
    rng = np.random.default_rng(seed)
    seqs = []
    for b in range(batch):
        gaps = np.where(rng.random(length) < 0.1, rng.uniform(700, 5000, length), rng.exponential(2.0, length))
        ts = np.cumsum(gaps)
        seqs.append(augment(f"bench{b}", rng.integers(1, n_exercises + 1, length), rng.integers(0, 2, length), ts))
    return make_batch(seqs)


def _stats(samples_ms: Sequence[float]) -> dict:
    a = np.asarray(samples_ms, dtype=np.float64)
    return {
        "reps": int(a.size),
        "mean_ms": float(a.mean()),
        "p50_ms": float(np.percentile(a, 50)),
        "p95_ms": float(np.percentile(a, 95)),
        "min_ms": float(a.min()),
        "samples_ms": a.tolist(),
    }


def latency_bench(model, batch_size: int = 64, length: int = 200, reps: int = 10, warmup: int = 2,
                  seed: int = 0) -> dict:
    """Wall-clock forward latency in eval mode on a fixed synthetic batch.

    Logit biases are built before timing starts; only the forward pass is
    timed.  Warm-up repetitions are discarded.
    """
    return compare_latency({"model": model}, batch_size, length, reps, warmup, seed)["model"]


def compare_latency(models: Mapping[str, object], batch_size: int = 64, length: int = 200, reps: int = 10,
                    warmup: int = 2, seed: int = 0) -> dict[str, dict]:
    """Latency stats for several models, interleaving their repetitions.

    Interleaving keeps slow drifts in machine load from favouring whichever
    model happens to run first.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    any_model = next(iter(models.values()))
    batch = synthetic_batch(any_model.config.n_exercises, batch_size, length, seed)
    prepared = {name: m.prepare(batch) for name, m in models.items()}
    samples: dict[str, list[float]] = {name: [] for name in models}
    with no_grad():
        for i in range(warmup + reps):
            for name, m in models.items():
                t0 = time.perf_counter()
                m.forward(batch, training=False, masks=prepared[name])
                dt = (time.perf_counter() - t0) * 1000.0
                if i >= warmup:
                    samples[name].append(dt)
    return {name: _stats(s) for name, s in samples.items()}


@dataclass
class AttentionExport:
    """Attention weights of one sequence, per layer and head, over its valid prefix."""

    student_id: str
    weights: list[np.ndarray]  # per layer: [h, L, L]
    session_boundaries: list[int]
    lags: np.ndarray
    session_ids: np.ndarray
    session_steps: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_heads(self) -> int:
        return self.weights[0].shape[0] if self.weights else 0

    def rows(self):
        for l, w in enumerate(self.weights):
            for h in range(w.shape[0]):
                for q in range(w.shape[1]):
                    for k in range(w.shape[2]):
                        yield l, h, q, k, float(w[h, q, k])

    def write_csv(self, directory: str | os.PathLike) -> list[Path]:
        """One CSV per (layer, head), plus session boundaries and the lag matrix."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for l, w in enumerate(self.weights):
            for h in range(w.shape[0]):
                path = directory / f"attention_layer{l}_head{h}.csv"
                with open(path, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["layer", "head", "query", "key", "weight"])
                    L = w.shape[1]
                    for q in range(L):
                        for k in range(L):
                            writer.writerow([l, h, q, k, repr(float(w[h, q, k]))])
                paths.append(path)
        with open(directory / "sessions.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["position", "session_id", "session_step", "boundary"])
            for t, (s, tau) in enumerate(zip(self.session_ids, self.session_steps)):
                writer.writerow([t, int(s), int(tau), int(t in self.session_boundaries)])
        with open(directory / "lags.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query", "key", "lag_minutes"])
            L = self.lags.shape[0]
            for q in range(L):
                for k in range(q + 1):
                    writer.writerow([q, k, repr(float(self.lags[q, k]))])
        return paths


def export_attention(model, sequence: AugmentedSequence) -> AttentionExport:
    causal = model.config.lag_normalization == "causal"
    batch = make_batch([sequence], causal_lags=causal)
    with no_grad():
        out = model.forward(batch, training=False, return_attention=True)
    n = sequence.valid_len
    weights = [w[0, :, :n, :n].copy() for w in out.attention]
    lags, _ = time_lag_matrix(sequence.timestamps)
    boundaries = [int(t) for t in np.flatnonzero(sequence.session_steps == 0)]
    return AttentionExport(sequence.student_id, weights, boundaries, lags, sequence.session_ids.copy(),
                           sequence.session_steps.copy(), {"variant": model.config.variant})


def pre_gap_mass(export: AttentionExport, gap_position: int) -> float:
    """Mean attention mass that queries at or after ``gap_position`` put on keys before it.

    Averaged over every layer, head and post-gap query.
    """
    masses = [w[:, gap_position:, :gap_position].sum(axis=-1).mean() for w in export.weights]
    return float(np.mean(masses))
