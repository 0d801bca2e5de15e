"""Synthetic student simulator with session warm-up and power-law forgetting.

Every simulated response is a Bernoulli draw from a stored ground-truth
probability, so a dataset doubles as an oracle: the AUC of the hidden
probabilities is the ceiling any model can reach on it.

Per step the success probability is::

    p = clamp(mastery * retention * warmup, slip, 1 - guess)
    mastery   = sigmoid(ability - difficulty(skill, item) + gain * n_correct(skill))
    retention = (hours since the skill was last practised + 1) ** -decay
    warmup    = 1 - depth * (w - tau) / w   for the first w steps of a session

A skill seen for the first time has retention 1.  Retention is per skill, so
elapsed time carries information that the position in the sequence does not.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .evaluation.metrics import auc
from .features.ingest import Interaction, InteractionLog, LogSchema, build_vocab, write_log
from .features.sequences import AugmentedSequence, build_sequences
from .features.sessions import DEFAULT_GAP_MINUTES

# parse_log multiplies by this factor; matching it keeps in-memory and parsed logs bit-identical
_MINUTES_PER_SECOND = 1.0 / 60.0

#: Column layout of generated logs (timestamps in integer seconds).
SYNTH_SCHEMA = LogSchema(elapsed="elapsed_s")
HIDDEN_COLUMNS = ("student_id", "step", "timestamp", "exercise_id", "skill_id", "session", "session_step",
                  "prob", "correct")


@dataclass(frozen=True)
class SynthConfig:
    n_students: int = 500
    n_skills: int = 50
    items_per_skill: int = 2
    skills_per_student: int = 12
    skills_per_session: int = 3
    min_sessions: int = 6
    max_sessions: int = 10
    min_session_len: int = 15
    max_session_len: int = 25
    ability_sd: float = 1.0
    difficulty_sd: float = 1.0
    item_sd: float = 0.3
    gain: float = 0.2
    decay: float = 0.1
    warmup_depth: float = 0.2
    warmup_len: int = 3
    guess: float = 0.05
    slip: float = 0.05
    # within-session gaps: exponential, in minutes, capped well below the session gap
    step_gap_minutes: float = 1.5
    max_step_gap_minutes: float = 60.0
    # inter-session gaps: log-uniform between these bounds (minutes)
    session_gap_min_minutes: float = 1.05 * DEFAULT_GAP_MINUTES
    session_gap_max_minutes: float = 30 * 24 * 60.0
    start_time_s: int = 1_600_000_000
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_students < 1 or self.n_skills < 1 or self.items_per_skill < 1:
            raise ConfigError("n_students, n_skills and items_per_skill must be >= 1")
        if self.decay < 0:
            raise ConfigError("decay exponent must be >= 0")
        if not (0 < self.slip < 1 - self.guess < 1):
            raise ConfigError("need 0 < slip < 1 - guess < 1")
        if not 0 <= self.warmup_depth < 1:
            raise ConfigError("warmup_depth must be in [0, 1)")
        if self.min_sessions < 1 or self.max_sessions < self.min_sessions:
            raise ConfigError("bad session count range")
        if self.min_session_len < 1 or self.max_session_len < self.min_session_len:
            raise ConfigError("bad session length range")
        if self.skills_per_session > self.skills_per_student or self.skills_per_student > self.n_skills:
            raise ConfigError("need skills_per_session <= skills_per_student <= n_skills")
        if self.max_step_gap_minutes >= self.session_gap_min_minutes:
            raise ConfigError("within-session gaps must stay below inter-session gaps")

    @property
    def mean_sessions(self) -> float:
        return (self.min_sessions + self.max_sessions) / 2

    def with_(self, **changes) -> "SynthConfig":
        return SynthConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def success_probability(mastery, hours_since, tau, cfg: SynthConfig):
    """Clamped success probability; ``hours_since`` is NaN for a first encounter."""
    hours = np.asarray(hours_since, dtype=np.float64)
    retention = np.where(np.isnan(hours), 1.0, (np.nan_to_num(hours) + 1.0) ** -cfg.decay)
    tau = np.asarray(tau)
    warm = np.where(tau < cfg.warmup_len,
                    1.0 - cfg.warmup_depth * (cfg.warmup_len - tau) / max(cfg.warmup_len, 1), 1.0)
    return np.clip(mastery * retention * warm, cfg.slip, 1.0 - cfg.guess)


@dataclass
class StudentTrace:
    student_id: str
    timestamps_s: np.ndarray
    exercise_ids: list[str]
    skill_ids: list[str]
    sessions: np.ndarray  # scheduled, 1-indexed
    session_steps: np.ndarray
    probs: np.ndarray
    responses: np.ndarray
    elapsed_s: np.ndarray


@dataclass
class SynthDataset:
    config: SynthConfig
    students: list[StudentTrace] = field(default_factory=list)

    @property
    def n_interactions(self) -> int:
        return sum(len(s.probs) for s in self.students)

    def rows(self):
        for s in self.students:
            for i in range(len(s.probs)):
                yield {
                    "student_id": s.student_id,
                    "exercise_id": s.exercise_ids[i],
                    "correct": int(s.responses[i]),
                    "timestamp": int(s.timestamps_s[i]),
                    "skill_id": s.skill_ids[i],
                    "elapsed_s": int(s.elapsed_s[i]),
                }

    def interaction_log(self) -> InteractionLog:
        """The log :func:`parse_log` would return for the written file."""
        vocab = build_vocab(e for s in self.students for e in s.exercise_ids)
        students = {}
        for s in self.students:
            students[s.student_id] = [
                Interaction(s.student_id, vocab[s.exercise_ids[i]], int(s.responses[i]),
                            float(s.timestamps_s[i]) * _MINUTES_PER_SECOND,
                            s.skill_ids[i], float(s.elapsed_s[i]), s.exercise_ids[i])
                for i in range(len(s.probs))
            ]
        return InteractionLog(students=dict(sorted(students.items())), vocab=vocab)

    def sequences(self, gap: float = DEFAULT_GAP_MINUTES) -> list[AugmentedSequence]:
        return build_sequences(self.interaction_log(), gap)

    def hidden_lookup(self) -> dict[tuple[str, float], float]:
        return {(s.student_id, float(t) * _MINUTES_PER_SECOND): float(p)
                for s in self.students for t, p in zip(s.timestamps_s, s.probs)}

    def probs_for(self, sequences: Sequence[AugmentedSequence]) -> tuple[np.ndarray, np.ndarray]:
        """Hidden probabilities and responses at the scored steps of ``sequences``."""
        lookup = self.hidden_lookup()
        probs, labels = [], []
        for seq in sequences:
            for t in np.flatnonzero(seq.target_mask):
                probs.append(lookup[(seq.student_id, float(seq.timestamps[t]))])
                labels.append(int(seq.responses[t]))
        return np.asarray(probs), np.asarray(labels)

    def write(self, directory: str | os.PathLike) -> tuple[Path, Path]:
        """Write ``log.csv`` (parse_log format) and the ``hidden.csv`` sidecar."""
        directory = Path(directory)
        log_path = write_log(directory / "log.csv", self.rows(), SYNTH_SCHEMA)
        hidden_path = directory / "hidden.csv"
        with open(hidden_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HIDDEN_COLUMNS)
            for s in self.students:
                for i in range(len(s.probs)):
                    w.writerow([s.student_id, i, int(s.timestamps_s[i]), s.exercise_ids[i], s.skill_ids[i],
                                int(s.sessions[i]), int(s.session_steps[i]), repr(float(s.probs[i])),
                                int(s.responses[i])])
        (directory / "synth_config.json").write_text(json.dumps(self.config.to_dict(), indent=2))
        return log_path, hidden_path


def _simulate_student(idx: int, cfg: SynthConfig, difficulty, item_offset, rng: np.random.Generator) -> StudentTrace:
    ability = rng.normal(0.0, cfg.ability_sd)
    pool = rng.choice(cfg.n_skills, cfg.skills_per_student, replace=False)
    n_sessions = int(rng.integers(cfg.min_sessions, cfg.max_sessions + 1))
    log_lo, log_hi = np.log(cfg.session_gap_min_minutes), np.log(cfg.session_gap_max_minutes)

    n_correct = np.zeros(cfg.n_skills)
    last_seen = np.full(cfg.n_skills, np.nan)
    t = float(cfg.start_time_s + rng.integers(0, 86_400))
    ts, ex, sk, sess, steps, probs, resp, elapsed = [], [], [], [], [], [], [], []
    for s in range(n_sessions):
        if s:
            t += round(60.0 * np.exp(rng.uniform(log_lo, log_hi)))
        active = rng.choice(pool, cfg.skills_per_session, replace=False)
        length = int(rng.integers(cfg.min_session_len, cfg.max_session_len + 1))
        for tau in range(length):
            if tau:
                gap_min = min(rng.exponential(cfg.step_gap_minutes), cfg.max_step_gap_minutes)
                t += max(1, round(60.0 * gap_min))
            k = int(rng.choice(active))
            j = int(rng.integers(cfg.items_per_skill))
            mastery = 1.0 / (1.0 + np.exp(-(ability - difficulty[k] - item_offset[k, j] + cfg.gain * n_correct[k])))
            hours = (t - last_seen[k]) / 3600.0
            p = float(success_probability(mastery, hours, tau, cfg))
            r = int(rng.random() < p)
            n_correct[k] += r
            last_seen[k] = t
            ts.append(int(t))
            ex.append(str(k * cfg.items_per_skill + j + 1))
            sk.append(str(k + 1))
            sess.append(s + 1)
            steps.append(tau)
            probs.append(p)
            resp.append(r)
            elapsed.append(int(rng.integers(5, 121)))
    return StudentTrace(f"s{idx:05d}", np.asarray(ts, dtype=np.int64), ex, sk, np.asarray(sess), np.asarray(steps),
                        np.asarray(probs), np.asarray(resp, dtype=np.int64), np.asarray(elapsed))


def generate(config: SynthConfig | None = None) -> SynthDataset:
    """Simulate ``config.n_students`` students; deterministic given ``config.seed``."""
    cfg = config or SynthConfig()
    root = np.random.SeedSequence(cfg.seed)
    world_seed, *student_seeds = root.spawn(cfg.n_students + 1)
    world = np.random.default_rng(world_seed)
    difficulty = world.normal(0.0, cfg.difficulty_sd, cfg.n_skills)
    item_offset = world.normal(0.0, cfg.item_sd, (cfg.n_skills, cfg.items_per_skill))
    students = [_simulate_student(i, cfg, difficulty, item_offset, np.random.default_rng(ss))
                for i, ss in enumerate(student_seeds)]
    return SynthDataset(cfg, students)


def oracle_auc(dataset: SynthDataset, sequences: Sequence[AugmentedSequence] | None = None) -> float | None:
    """AUC of the hidden probabilities against the realised responses.

    With ``sequences`` only their scored steps count, which makes the value
    directly comparable to a model evaluated on the same sequences.
    """
    if sequences is None:
        probs = np.concatenate([s.probs for s in dataset.students])
        labels = np.concatenate([s.responses for s in dataset.students])
    else:
        probs, labels = dataset.probs_for(sequences)
    return auc(probs, labels)


def read_hidden(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Load a ``hidden.csv`` sidecar as per-student probability arrays (file order)."""
    out: dict[str, list[float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["student_id"], []).append(float(row["prob"]))
    return {k: np.asarray(v) for k, v in out.items()}
