"""Dataset-level prediction and the evaluation report."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..features.sequences import AugmentedSequence, iterate_batches
from .metrics import DEFAULT_LENGTH_BUCKETS, acc, auc, length_buckets, macro_auc


@dataclass
class Predictions:
    scores: np.ndarray
    labels: np.ndarray
    source_lengths: np.ndarray
    students: np.ndarray

    def __len__(self) -> int:
        return self.scores.size


def predict_dataset(model, sequences: Sequence[AugmentedSequence], batch_size: int = 64) -> Predictions:
    """Predictions for every scored, non-padded step of ``sequences``."""
    causal = model.config.lag_normalization == "causal"
    scores, labels, lengths, students = [], [], [], []
    for batch in iterate_batches(sequences, batch_size, causal_lags=causal):
        p = model.predict(batch)
        sel = batch.score & batch.valid
        scores.append(p[sel])
        labels.append(batch.target[sel])
        lengths.append(np.broadcast_to(batch.source_lengths[:, None], sel.shape)[sel])
        students.append(np.broadcast_to(np.array(batch.student_ids, dtype=object)[:, None], sel.shape)[sel])
    if not scores:
        empty = np.zeros(0)
        return Predictions(empty, empty, empty.astype(int), empty.astype(object))
    return Predictions(np.concatenate(scores), np.concatenate(labels), np.concatenate(lengths),
                       np.concatenate(students))


@dataclass
class EvalReport:
    auc: float | None
    acc: float | None
    n_predictions: int
    macro_auc: float | None = None
    length_buckets: list[dict] = field(default_factory=list)
    param_count: dict[str, int] = field(default_factory=dict)
    flops: dict[str, float] = field(default_factory=dict)
    latency: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, default=float))
        return path


def evaluate(model, sequences: Sequence[AugmentedSequence], batch_size: int = 64,
             boundaries=DEFAULT_LENGTH_BUCKETS, macro: bool = False) -> EvalReport:
    preds = predict_dataset(model, sequences, batch_size)
    if len(preds) == 0:
        return EvalReport(None, None, 0)
    return EvalReport(
        auc=auc(preds.scores, preds.labels),
        acc=acc(preds.scores, preds.labels),
        n_predictions=len(preds),
        macro_auc=macro_auc(preds.scores, preds.labels, preds.students) if macro else None,
        length_buckets=length_buckets(preds.scores, preds.labels, preds.source_lengths, boundaries),
    )
