"""Training loop, early stopping, ablation matrix and decay-rate sweep.

Checkpoint directory layout for one run::

    <out>/best.npz        parameters at the epoch with the highest validation AUC
    <out>/last_good.npz   written only when a run diverges
    <out>/epochs.jsonl    one JSON record per epoch
    <out>/record.json     the full RunRecord
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError
from .evaluation.report import evaluate
from .features.sequences import DatasetSplit, iterate_batches
from .model.config import VARIANTS, ModelConfig
from .model.network import FlatFormer, build_variant
from .numerics.checkpoint import save_checkpoint
from .numerics.optim import AdamState, adam_step, clip_grad_norm, zero_grads

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_BETAS = (0.01, 0.05, 0.1, 0.2, 0.5)
LR_GRID = (1e-3, 5e-4, 1e-4)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    patience: int = 5
    lr: float = 1e-3
    lr_grid: tuple[float, ...] = ()
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    batch_size: int = 64
    eval_batch_size: int = 64
    weight_decay: float = 1e-5
    grad_clip: float = 5.0
    variant: str = "full"
    betas: tuple[float, ...] = DEFAULT_BETAS

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "lr_grid", tuple(float(x) for x in self.lr_grid))
        object.__setattr__(self, "betas", tuple(float(x) for x in self.betas))
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 < self.patience < self.epochs:
            raise ConfigError(f"need 0 < patience < epochs, got patience={self.patience}, epochs={self.epochs}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.lr <= 0 or any(x <= 0 for x in self.lr_grid):
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if any(b < 0 for b in self.betas):
            raise ConfigError("betas must be >= 0")

    def with_(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_auc: float | None
    val_acc: float | None
    seconds: float
    grad_norm: float


@dataclass
class RunRecord:
    variant: str
    seed: int
    lr: float
    beta: float
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float | None = None
    best_checkpoint: str | None = None
    test_auc: float | None = None
    test_acc: float | None = None
    train_auc: float | None = None
    wall_clock: float = 0.0
    stopped_early: bool = False

    @property
    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def to_dict(self) -> dict:
        return asdict(self)


def _seed_everything(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 7919]))


def train_epoch(model: FlatFormer, sequences, opt: AdamState, cfg: TrainConfig, rng: np.random.Generator,
                causal: bool) -> tuple[float, float]:
    """One pass over ``sequences``; returns (mean loss per scored step, max grad norm)."""
    params = model.parameters()
    total, count, max_norm = 0.0, 0, 0.0
    for batch in iterate_batches(sequences, cfg.batch_size, rng=rng, causal_lags=causal):
        n = int((batch.score & batch.valid).sum())
        if n == 0:
            continue
        zero_grads(params)
        loss = model.loss(batch, training=True, rng=rng)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite training loss {value}", diagnostics={"loss": value})
        loss.backward()
        max_norm = max(max_norm, clip_grad_norm(params, cfg.grad_clip))
        adam_step(params, opt)
        total += value * n
        count += n
    return (total / count if count else float("nan")), max_norm


def train_auc(model: FlatFormer, sequences, batch_size: int = 64) -> float | None:
    return evaluate(model, sequences, batch_size).auc


def train(model: FlatFormer, split: DatasetSplit, config: TrainConfig, seed: int = 0, lr: float | None = None,
          out_dir: str | os.PathLike | None = None, log_epochs: bool = False) -> RunRecord:
    """Train ``model`` on ``split.train`` with early stopping on validation AUC.

    The parameters of the best validation epoch are restored before test
    metrics are computed.  Without a validation set, the last epoch is kept.
    On a non-finite loss or gradient the last good parameters are written to
    ``last_good.npz`` and :class:`DivergenceError` is raised.
    """
    if not split.train:
        raise ConfigError("training split is empty")
    cfg_m = model.config
    lr = config.lr if lr is None else lr
    rng = _seed_everything(seed)
    opt = AdamState(lr=lr, weight_decay=config.weight_decay)
    causal = cfg_m.lag_normalization == "causal"
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "epochs.jsonl").write_text("")

    record = RunRecord(cfg_m.variant, seed, lr, cfg_m.effective_beta)
    best_state = model.state_dict()
    best_auc = -math.inf
    stale = 0
    start = time.perf_counter()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        good_state = model.state_dict()
        try:
            loss, gnorm = train_epoch(model, split.train, opt, config, rng, causal)
        except DivergenceError as exc:
            if out is not None:
                path = save_checkpoint(out / "last_good.npz", good_state, cfg_m.to_dict(), seed, {"epoch": epoch})
                exc.diagnostics["last_good_checkpoint"] = str(path)
            exc.diagnostics["epoch"] = epoch
            raise
        if split.validation:
            rep = evaluate(model, split.validation, config.eval_batch_size)
            val_auc, val_acc = rep.auc, rep.acc
        else:
            val_auc = val_acc = None
        stats = EpochStats(epoch, loss, val_auc, val_acc, time.perf_counter() - t0, gnorm)
        record.epochs.append(stats)
        if out is not None:
            with open(out / "epochs.jsonl", "a") as fh:
                fh.write(json.dumps(asdict(stats)) + "\n")
        if log_epochs:
            log.info("%s seed=%d epoch=%d loss=%.4f val_auc=%s", cfg_m.variant, seed, epoch, loss, val_auc)

        # without validation every epoch supersedes the previous one
        score = val_auc if val_auc is not None else (math.inf if not split.validation else -math.inf)
        if score > best_auc or record.best_epoch < 0 or not split.validation:
            best_auc = score
            best_state = model.state_dict()
            record.best_epoch = epoch
            record.best_val_auc = val_auc
            stale = 0
            if out is not None:
                record.best_checkpoint = str(save_checkpoint(out / "best.npz", best_state, cfg_m.to_dict(), seed,
                                                             {"epoch": epoch, "val_auc": val_auc, "lr": lr}))
        else:
            stale += 1
            if stale >= config.patience:
                record.stopped_early = True
                break

    model.load_state_dict(best_state)
    record.wall_clock = time.perf_counter() - start
    if split.test:
        rep = evaluate(model, split.test, config.eval_batch_size)
        record.test_auc, record.test_acc = rep.auc, rep.acc
    if out is not None:
        (out / "record.json").write_text(json.dumps(record.to_dict(), indent=2))
    return record


def train_variant(model_config: ModelConfig, split: DatasetSplit, config: TrainConfig, seed: int,
                  out_dir: str | os.PathLike | None = None) -> tuple[RunRecord, FlatFormer]:
    """Build a fresh model and train it, picking the learning rate from ``config.lr_grid`` if set.

    Grid candidates are compared on best validation AUC; the winner's record
    and model are returned.
    """
    grid = config.lr_grid or (config.lr,)
    best: tuple[RunRecord, FlatFormer] | None = None
    for lr in grid:
        model = build_variant(model_config, seed=seed)
        sub = None
        if out_dir is not None:
            sub = Path(out_dir) / (f"lr{lr:g}" if len(grid) > 1 else "")
        rec = train(model, split, config, seed=seed, lr=lr, out_dir=sub)
        if best is None or (rec.best_val_auc or -1.0) > (best[0].best_val_auc or -1.0):
            best = (rec, model)
    return best


def _mean_std(values: Iterable[float | None]) -> tuple[float | None, float | None, int]:
    v = np.array([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return None, None, 0
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0, int(v.size)


@dataclass
class MatrixResult:
    records: list[RunRecord]
    rows: list[dict]

    def row(self, variant: str) -> dict:
        for r in self.rows:
            if r["variant"] == variant:
                return r
        raise KeyError(variant)

    def write(self, directory: str | os.PathLike, stem: str = "ablation") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        jpath = directory / f"{stem}.json"
        jpath.write_text(json.dumps({"rows": self.rows, "runs": [r.to_dict() for r in self.records]}, indent=2))
        cpath = directory / f"{stem}.csv"
        _write_rows(cpath, self.rows)
        return jpath, cpath


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else [])
        w.writeheader()
        w.writerows(rows)


def _summarise(key: str, value, records: Sequence[RunRecord]) -> dict:
    auc_m, auc_s, n = _mean_std(r.test_auc for r in records)
    acc_m, acc_s, _ = _mean_std(r.test_acc for r in records)
    val_m, _, _ = _mean_std(r.best_val_auc for r in records)
    return {key: value, "runs": len(records), "auc_mean": auc_m, "auc_std": auc_s, "acc_mean": acc_m,
            "acc_std": acc_s, "val_auc_mean": val_m,
            "seconds_mean": float(np.mean([r.wall_clock for r in records])) if records else None}


RunCache = dict  # (variant, beta, seed) -> (RunRecord, FlatFormer)


def _cached_run(cache: RunCache | None, model_config: ModelConfig, split, config, seed, out_dir):
    key = (model_config.variant, model_config.effective_beta, seed)
    if cache is not None and key in cache:
        return cache[key]
    result = train_variant(model_config, split, config, seed, out_dir)
    if cache is not None:
        cache[key] = result
    return result


def run_matrix(split: DatasetSplit, variants: Sequence[str], seeds: Sequence[int], model_config: ModelConfig,
               config: TrainConfig, out_dir: str | os.PathLike | None = None,
               cache: RunCache | None = None,
               progress: Callable[[RunRecord], None] | None = None) -> MatrixResult:
    """Train every (variant, seed) pair; one summary row per variant (mean and sample std over seeds).

    ``cache`` maps ``(variant, effective beta, seed)`` to finished runs and is
    filled as runs complete, so a later sweep can reuse matching runs.
    """
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}; choose from {VARIANTS}")
    records, rows = [], []
    for v in variants:
        per_variant = []
        for seed in seeds:
            sub = Path(out_dir) / v / f"seed{seed}" if out_dir is not None else None
            rec, _ = _cached_run(cache, model_config.with_(variant=v), split, config, seed, sub)
            per_variant.append(rec)
            if progress:
                progress(rec)
        records.extend(per_variant)
        rows.append(_summarise("variant", v, per_variant))
    result = MatrixResult(records, rows)
    if out_dir is not None:
        result.write(out_dir)
    return result


def beta_sweep(split: DatasetSplit, betas: Sequence[float], seeds: Sequence[int], model_config: ModelConfig,
               config: TrainConfig, out_dir: str | os.PathLike | None = None, cache: RunCache | None = None,
               progress: Callable[[RunRecord], None] | None = None) -> MatrixResult:
    """Full-variant test AUC for each decay rate; writes ``beta_curve.csv`` with one row per rate."""
    if model_config.with_(variant="full").multi_rate:
        raise ConfigError("beta sweep needs the single-rate forgetting bias (multi_rate=False)")
    records, rows = [], []
    for b in betas:
        per_beta = []
        for seed in seeds:
            sub = Path(out_dir) / f"beta{b:g}" / f"seed{seed}" if out_dir is not None else None
            rec, _ = _cached_run(cache, model_config.with_(variant="full", beta=float(b)), split, config, seed, sub)
            per_beta.append(rec)
            if progress:
                progress(rec)
        records.extend(per_beta)
        rows.append(_summarise("beta", float(b), per_beta))
    result = MatrixResult(records, rows)
    if out_dir is not None:
        result.write(out_dir, stem="beta_curve")
    return result


__all__ = [
    "DEFAULT_BETAS",
    "DEFAULT_SEEDS",
    "LR_GRID",
    "EpochStats",
    "MatrixResult",
    "RunRecord",
    "TrainConfig",
    "beta_sweep",
    "run_matrix",
    "train",
    "train_auc",
    "train_epoch",
    "train_variant",
]
