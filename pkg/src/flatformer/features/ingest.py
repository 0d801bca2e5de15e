"""Reading delimited interaction logs and applying the cleaning rules."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from ..errors import ConfigError, DataError

log = logging.getLogger(__name__)

NULL_TOKENS = frozenset({"", "na", "nan", "null", "none"})

_UNIT_TO_MINUTES = {
    "milliseconds": 1.0 / 60000.0,
    "ms": 1.0 / 60000.0,
    "seconds": 1.0 / 60.0,
    "s": 1.0 / 60.0,
    "minutes": 1.0,
    "min": 1.0,
    "hours": 60.0,
    "h": 60.0,
}

MAX_BAD_ROW_FRACTION = 0.01
MAX_ELAPSED_SECONDS = 9999.0


@dataclass(frozen=True)
class LogSchema:
    """Column mapping for a delimited interaction log.

    ``item`` selects which column feeds the exercise vocabulary: ``"exercise"``
    (default) or ``"skill"``.  ``timestamp_unit`` is one of milliseconds,
    seconds, minutes, hours or ``iso`` (ISO-8601 datetimes).
    """

    student: str = "student_id"
    exercise: str = "exercise_id"
    correct: str = "correct"
    timestamp: str = "timestamp"
    timestamp_unit: str = "seconds"
    skill: str | None = "skill_id"
    elapsed: str | None = None
    elapsed_unit: str = "seconds"
    item: str = "exercise"
    delimiter: str = ","

    def __post_init__(self):
        if self.item not in ("exercise", "skill"):
            raise ConfigError(f"schema.item must be 'exercise' or 'skill', got {self.item!r}")
        if self.item == "skill" and not self.skill:
            raise ConfigError("schema.item='skill' needs a skill column")
        if self.timestamp_unit not in _UNIT_TO_MINUTES and self.timestamp_unit != "iso":
            raise ConfigError(f"unknown timestamp unit {self.timestamp_unit!r}")
        if self.elapsed_unit not in _UNIT_TO_MINUTES:
            raise ConfigError(f"unknown elapsed unit {self.elapsed_unit!r}")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LogSchema":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "LogSchema":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def required_columns(self) -> list[str]:
        cols = [self.student, self.exercise, self.correct, self.timestamp]
        if self.skill:
            cols.append(self.skill)
        if self.elapsed:
            cols.append(self.elapsed)
        return cols


@dataclass(frozen=True, slots=True)
class Interaction:
    student_id: str
    exercise: int  # vocabulary index, 1-based; 0 only for null items awaiting cleaning
    response: int
    timestamp: float  # minutes since epoch
    skill: str | None = None
    elapsed_s: float | None = None
    raw_item: str = ""


@dataclass
class ParseReport:
    rows: int = 0
    parsed: int = 0
    bad_rows: int = 0
    bad_examples: list[str] = field(default_factory=list)


@dataclass
class CleaningReport:
    input: int = 0
    null_skill: int = 0
    null_item: int = 0
    excessive_elapsed: int = 0
    kept: int = 0
    elapsed_source: str = "none"


@dataclass
class InteractionLog:
    """Per-student interaction lists, each sorted by timestamp."""

    students: dict[str, list[Interaction]]
    vocab: dict[str, int]
    parse_report: ParseReport | None = None
    cleaning_report: CleaningReport | None = None
    has_skill: bool = True

    @property
    def n_interactions(self) -> int:
        return sum(len(v) for v in self.students.values())

    @property
    def n_exercises(self) -> int:
        return len(self.vocab)

    def reports(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        if self.parse_report:
            out["parse"] = asdict(self.parse_report)
        if self.cleaning_report:
            out["cleaning"] = asdict(self.cleaning_report)
        return out


def is_null(value: str | None) -> bool:
    return value is None or value.strip().lower() in NULL_TOKENS


def _sort_key(raw: str):
    try:
        return (0, float(raw), raw)
    except ValueError:
        return (1, 0.0, raw)


def build_vocab(items) -> dict[str, int]:
    """Map distinct raw ids to 1..n in a row-order independent way."""
    distinct = sorted(set(items), key=_sort_key)
    return {raw: i + 1 for i, raw in enumerate(distinct)}


def _parse_time(raw: str, unit: str) -> float:
    raw = raw.strip()
    if unit == "iso":
        dt = datetime.fromisoformat(raw)
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return dt.timestamp() / 60.0
    value = float(raw)
    if not math.isfinite(value):
        raise ValueError(f"non-finite timestamp {raw!r}")
    return value * _UNIT_TO_MINUTES[unit]


def _parse_correct(raw: str) -> int:
    value = float(raw)
    if value not in (0.0, 1.0):
        raise ValueError(f"response must be 0/1, got {raw!r}")
    return int(value)


def parse_log(path: str | os.PathLike, schema: LogSchema | None = None) -> InteractionLog:
    """Read a delimited log into per-student, time-sorted interaction lists.

    Unparseable rows are skipped and counted; if more than 1% of rows are bad
    the whole file is rejected.  Rows whose item or skill is null are kept
    (with exercise index 0 when the item itself is null) so that
    :func:`clean` can account for them.
    """
    schema = schema or LogSchema()
    path = Path(path)
    if not path.exists():
        raise DataError(f"log file not found: {path}")
    report = ParseReport()
    raw_rows: list[tuple[str, str, int, float, str | None, float | None]] = []

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=schema.delimiter)
        header = reader.fieldnames or []
        if not header:
            raise DataError(f"{path}: empty file (no header)")
        missing = [c for c in schema.required_columns() if c not in header]
        if missing:
            raise ConfigError(f"{path}: schema columns missing from header {header}: {missing}")
        item_col = schema.exercise if schema.item == "exercise" else schema.skill
        for lineno, row in enumerate(reader, start=2):
            report.rows += 1
            try:
                student = row[schema.student]
                if is_null(student):
                    raise ValueError("missing student id")
                ts = _parse_time(row[schema.timestamp], schema.timestamp_unit)
                correct = _parse_correct(row[schema.correct])
                skill = None if not schema.skill or is_null(row[schema.skill]) else row[schema.skill].strip()
                elapsed = None
                if schema.elapsed and not is_null(row[schema.elapsed]):
                    elapsed = float(row[schema.elapsed]) * _UNIT_TO_MINUTES[schema.elapsed_unit] * 60.0
                item = row[item_col]
                item = None if is_null(item) else item.strip()
            except (ValueError, TypeError, KeyError, AttributeError) as exc:
                report.bad_rows += 1
                if len(report.bad_examples) < 5:
                    report.bad_examples.append(f"line {lineno}: {exc}")
                continue
            raw_rows.append((student.strip(), item, correct, ts, skill, elapsed))

    if report.rows == 0:
        raise DataError(f"{path}: no data rows")
    if report.bad_rows > MAX_BAD_ROW_FRACTION * report.rows:
        raise DataError(
            f"{path}: {report.bad_rows}/{report.rows} unparseable rows exceeds 1%: {report.bad_examples}"
        )
    if report.bad_rows:
        log.warning("%s: skipped %d unparseable rows", path, report.bad_rows)

    vocab = build_vocab(r[1] for r in raw_rows if r[1] is not None)
    students: dict[str, list[Interaction]] = {}
    for student, item, correct, ts, skill, elapsed in raw_rows:
        students.setdefault(student, []).append(
            Interaction(student, vocab.get(item, 0) if item is not None else 0, correct, ts, skill, elapsed, item or "")
        )
    for seq in students.values():
        seq.sort(key=lambda it: it.timestamp)  # stable: ties keep file order
    report.parsed = len(raw_rows)
    return InteractionLog(students=dict(sorted(students.items())), vocab=vocab, parse_report=report,
                          has_skill=bool(schema.skill))


def clean(log_: InteractionLog, max_elapsed_s: float = MAX_ELAPSED_SECONDS, elapsed_source: str = "auto") -> InteractionLog:
    """Drop null-skill interactions and those with elapsed time > ``max_elapsed_s``.

    Rows with a null item are always dropped; the null-skill rule applies
    only when the log was read with a skill column.

    ``elapsed_source`` picks how elapsed time is measured:

    * ``"column"`` - the per-row time-spent column (rows without it are kept);
    * ``"gap"`` - seconds since the student's previous interaction;
    * ``"auto"`` - ``"column"`` if any row carries a time-spent value, else no
      elapsed-time rule.

    The comparison is strict, so exactly 9999 s is kept.
    """
    if elapsed_source not in ("auto", "column", "gap", "none"):
        raise ConfigError(f"unknown elapsed_source {elapsed_source!r}")
    source = elapsed_source
    if source == "auto":
        has_column = any(it.elapsed_s is not None for seq in log_.students.values() for it in seq)
        source = "column" if has_column else "none"

    report = CleaningReport(input=log_.n_interactions, elapsed_source=source)
    students: dict[str, list[Interaction]] = {}
    for sid, seq in log_.students.items():
        kept: list[Interaction] = []
        prev_ts = None
        for it in seq:
            gap_s = None if prev_ts is None else (it.timestamp - prev_ts) * 60.0
            prev_ts = it.timestamp
            if log_.has_skill and it.skill is None:
                report.null_skill += 1
                continue
            if it.exercise == 0:
                report.null_item += 1
                continue
            elapsed = it.elapsed_s if source == "column" else gap_s if source == "gap" else None
            if elapsed is not None and elapsed > max_elapsed_s:
                report.excessive_elapsed += 1
                continue
            kept.append(it)
        if kept:
            students[sid] = kept
    report.kept = sum(len(v) for v in students.values())
    return InteractionLog(students=students, vocab=log_.vocab, parse_report=log_.parse_report,
                          cleaning_report=report, has_skill=log_.has_skill)


def write_log(path: str | os.PathLike, rows, schema: LogSchema | None = None) -> Path:
    """Write interaction rows (dicts keyed by schema column names) as delimited text."""
    schema = schema or LogSchema()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = schema.required_columns()
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, delimiter=schema.delimiter, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path

