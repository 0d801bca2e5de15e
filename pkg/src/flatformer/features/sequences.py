"""Augmented per-student sequences, windowing, session-based splits and batching."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from ..errors import DataError
from .ingest import InteractionLog
from .sessions import DEFAULT_GAP_MINUTES, derive_sessions, log_lag_matrix, previous_step_log_lag

MIN_SEQ_LEN = 3
DEFAULT_MAX_LEN = 200
#: Index of the <START> token in the answer embedding table.
START_TOKEN = 2


@dataclass
class AugmentedSequence:
    """One student's (windowed) interaction sequence plus derived features.

    ``target_mask`` marks positions that are scored (loss / metrics); context
    positions carried along for evaluation splits have it False.
    ``source_length`` is the length of the student's full history before any
    windowing or splitting.
    """

    student_id: str
    exercise_ids: np.ndarray
    responses: np.ndarray
    timestamps: np.ndarray
    session_ids: np.ndarray
    session_steps: np.ndarray
    target_mask: np.ndarray | None = None
    source_length: int = 0

    def __post_init__(self):
        n = len(self.exercise_ids)
        for name in ("responses", "timestamps", "session_ids", "session_steps"):
            if len(getattr(self, name)) != n:
                raise DataError(f"sequence {self.student_id}: {name} length differs from exercise_ids")
        if self.target_mask is None:
            self.target_mask = np.ones(n, dtype=bool)
        if not self.source_length:
            self.source_length = n

    @property
    def valid_len(self) -> int:
        return len(self.exercise_ids)

    def __len__(self) -> int:
        return self.valid_len

    def slice(self, start: int, stop: int) -> "AugmentedSequence":
        return AugmentedSequence(
            self.student_id,
            self.exercise_ids[start:stop],
            self.responses[start:stop],
            self.timestamps[start:stop],
            self.session_ids[start:stop],
            self.session_steps[start:stop],
            self.target_mask[start:stop],
            self.source_length,
        )

    def to_json(self) -> dict:
        return {
            "student_id": self.student_id,
            "exercise_ids": self.exercise_ids.tolist(),
            "responses": self.responses.tolist(),
            "timestamps": self.timestamps.tolist(),
            "session_ids": self.session_ids.tolist(),
            "session_steps": self.session_steps.tolist(),
            "target_mask": self.target_mask.astype(int).tolist(),
            "source_length": self.source_length,
        }

    @classmethod
    def from_json(cls, d: dict) -> "AugmentedSequence":
        return cls(
            d["student_id"],
            np.asarray(d["exercise_ids"], dtype=np.int64),
            np.asarray(d["responses"], dtype=np.int64),
            np.asarray(d["timestamps"], dtype=np.float64),
            np.asarray(d["session_ids"], dtype=np.int64),
            np.asarray(d["session_steps"], dtype=np.int64),
            np.asarray(d["target_mask"], dtype=bool),
            int(d.get("source_length", 0)),
        )


def augment(student_id: str, exercise_ids, responses, timestamps, gap: float = DEFAULT_GAP_MINUTES) -> AugmentedSequence:
    ts = np.asarray(timestamps, dtype=np.float64)
    s, tau = derive_sessions(ts, gap)
    return AugmentedSequence(
        student_id,
        np.asarray(exercise_ids, dtype=np.int64),
        np.asarray(responses, dtype=np.int64),
        ts,
        s,
        tau,
    )


def build_sequences(log: InteractionLog, gap: float = DEFAULT_GAP_MINUTES) -> list[AugmentedSequence]:
    """Full-length augmented sequence per student (no windowing yet)."""
    out = []
    for sid, items in log.students.items():
        out.append(augment(sid, [i.exercise for i in items], [i.response for i in items],
                           [i.timestamp for i in items], gap))
    return out


def window(seq: AugmentedSequence, max_len: int = DEFAULT_MAX_LEN, min_len: int = MIN_SEQ_LEN) -> list[AugmentedSequence]:
    """Cut into consecutive non-overlapping windows of at most ``max_len``.

    Session ids and steps are carried over unchanged.  Windows shorter than
    ``min_len`` or without any scored position are dropped.
    """
    out = []
    for start in range(0, seq.valid_len, max_len):
        w = seq.slice(start, start + max_len)
        if w.valid_len >= min_len and w.target_mask.any():
            out.append(w)
    return out


@dataclass
class DatasetSplit:
    train: list[AugmentedSequence]
    validation: list[AugmentedSequence]
    test: list[AugmentedSequence]
    manifest: dict[str, dict] = field(default_factory=dict)

    def summary(self) -> dict:
        def count(seqs):
            return {"sequences": len(seqs), "scored_steps": int(sum(s.target_mask.sum() for s in seqs))}

        return {"train": count(self.train), "validation": count(self.validation), "test": count(self.test)}


def session_counts(n_sessions: int, fractions=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    """Sessions assigned to (train, validation, test) under the ceiling rule.

    Students with fewer than 3 sessions go entirely to train.
    """
    if n_sessions < 3:
        return n_sessions, 0, 0
    n_train = min(math.ceil(fractions[0] * n_sessions - 1e-9), n_sessions)
    n_val = min(math.ceil(fractions[1] * n_sessions - 1e-9), n_sessions - n_train)
    return n_train, n_val, n_sessions - n_train - n_val


def split_by_sessions(sequences: Iterable[AugmentedSequence], fractions=(0.6, 0.2, 0.2),
                      max_len: int = DEFAULT_MAX_LEN, min_len: int = MIN_SEQ_LEN,
                      eval_context: bool = True) -> DatasetSplit:
    """Chronological per-student split by session.

    With ``eval_context`` the validation (test) sequences also contain the
    earlier sessions as unscored history, so predictions in a held-out
    session can condition on what came before it.  Only the held-out
    sessions are scored.
    """
    train, val, test = [], [], []
    manifest = {}
    for seq in sequences:
        n_sessions = int(seq.session_ids.max() - seq.session_ids.min() + 1) if seq.valid_len else 0
        n_tr, n_va, n_te = session_counts(n_sessions, fractions)
        rel = seq.session_ids - seq.session_ids.min()
        tr_end = int(np.searchsorted(rel, n_tr, side="left"))
        va_end = int(np.searchsorted(rel, n_tr + n_va, side="left"))
        manifest[seq.student_id] = {
            "sessions": n_sessions,
            "train_sessions": n_tr,
            "validation_sessions": n_va,
            "test_sessions": n_te,
            "train_end": tr_end,
            "validation_end": va_end,
        }
        train.extend(window(seq.slice(0, tr_end), max_len, min_len))
        if n_va:
            val.extend(_held_out(seq, tr_end, va_end, max_len, min_len, eval_context))
        if n_te:
            test.extend(_held_out(seq, va_end, seq.valid_len, max_len, min_len, eval_context))
    return DatasetSplit(train, val, test, manifest)


def _held_out(seq, start, stop, max_len, min_len, eval_context):
    if not eval_context:
        return window(seq.slice(start, stop), max_len, min_len)
    ctx = seq.slice(0, stop)
    ctx.target_mask = np.arange(stop) >= start
    return window(ctx, max_len, min_len)


# -- batching -----------------------------------------------------------------


@dataclass
class Batch:
    """Right-padded model inputs for a list of sequences.

    Shapes are ``[B, L]`` unless noted; ``log_lag`` is ``[B, L, L]``.
    ``prev_response`` holds ``a_{t-1}`` with the <START> token at t=0.
    """

    exercise: np.ndarray
    prev_response: np.ndarray
    target: np.ndarray
    session_ids: np.ndarray
    session_steps: np.ndarray
    positions: np.ndarray
    valid: np.ndarray
    score: np.ndarray
    log_lag: np.ndarray
    prev_log_lag: np.ndarray
    lengths: np.ndarray
    source_lengths: np.ndarray
    student_ids: list[str]

    @property
    def size(self) -> int:
        return self.exercise.shape[0]

    @property
    def length(self) -> int:
        return self.exercise.shape[1]


def make_batch(sequences: Sequence[AugmentedSequence], causal_lags: bool = False) -> Batch:
    if not sequences:
        raise DataError("make_batch needs at least one sequence")
    B = len(sequences)
    L = max(s.valid_len for s in sequences)
    ex = np.zeros((B, L), dtype=np.int64)
    prev = np.full((B, L), START_TOKEN, dtype=np.int64)
    target = np.zeros((B, L))
    sess = np.zeros((B, L), dtype=np.int64)
    steps = np.zeros((B, L), dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    score = np.zeros((B, L), dtype=bool)
    log_lag = np.zeros((B, L, L))
    prev_lag = np.zeros((B, L))
    for b, s in enumerate(sequences):
        n = s.valid_len
        ex[b, :n] = s.exercise_ids
        prev[b, 1:n] = s.responses[:-1]
        target[b, :n] = s.responses
        sess[b, :n] = s.session_ids
        steps[b, :n] = s.session_steps
        valid[b, :n] = True
        score[b, :n] = s.target_mask
        log_lag[b, :n, :n] = log_lag_matrix(s.timestamps, causal=causal_lags)
        prev_lag[b, :n] = previous_step_log_lag(s.timestamps, causal=causal_lags)
    positions = np.broadcast_to(np.arange(L), (B, L)).copy()
    return Batch(ex, prev, target, sess, steps, positions, valid, score, log_lag, prev_lag,
                 np.array([s.valid_len for s in sequences]),
                 np.array([s.source_length for s in sequences]),
                 [s.student_id for s in sequences])


def iterate_batches(sequences: Sequence[AugmentedSequence], batch_size: int = 64,
                    rng: np.random.Generator | None = None, causal_lags: bool = False) -> Iterator[Batch]:
    """Yield batches in order, or shuffled when ``rng`` is given."""
    order = np.arange(len(sequences))
    if rng is not None:
        rng.shuffle(order)
    for i in range(0, len(order), batch_size):
        yield make_batch([sequences[j] for j in order[i : i + batch_size]], causal_lags=causal_lags)


# -- shards and statistics ----------------------------------------------------


def write_shard(path: str | os.PathLike, sequences: Iterable[AugmentedSequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for s in sequences:
            fh.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")
    return path


def read_shard(path: str | os.PathLike) -> list[AugmentedSequence]:
    with open(path) as fh:
        return [AugmentedSequence.from_json(json.loads(line)) for line in fh if line.strip()]


def dataset_statistics(log: InteractionLog, sequences: Sequence[AugmentedSequence]) -> dict:
    """Students, questions, interactions, average sessions and interactions per session."""
    n_sessions = [int(s.session_ids.max()) for s in sequences if s.valid_len]
    total_sessions = sum(n_sessions)
    n_inter = sum(s.valid_len for s in sequences)
    skills = {it.skill for seq in log.students.values() for it in seq if it.skill is not None}
    return {
        "students": len(sequences),
        "questions": log.n_exercises,
        "skills": len(skills),
        "interactions": n_inter,
        "avg_sessions": total_sessions / len(sequences) if sequences else 0.0,
        "avg_interactions_per_session": n_inter / total_sessions if total_sessions else 0.0,
    }
