"""Command-line entry point.

Subcommands: ``derive``, ``synth``, ``train``, ``eval``, ``ablate``,
``sweep-beta`` and ``export-attention``.  Settings come from defaults, then an
optional JSON config file with sections ``model``, ``train``, ``data`` and
``synth``, then command-line flags.  A flag that disagrees with a value set
explicitly in the config file is a usage error.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, FlatFormerError
from .evaluation import (
    compare_latency,
    count_params,
    evaluate,
    export_attention,
    flops_estimate,
)
from .features.ingest import LogSchema, clean, parse_log
from .features.sequences import (
    DatasetSplit,
    build_sequences,
    dataset_statistics,
    read_shard,
    split_by_sessions,
    write_shard,
)
from .features.sessions import DEFAULT_GAP_MINUTES
from .model.config import ModelConfig
from .model.network import build_variant
from .numerics.checkpoint import load_checkpoint
from .synth import SynthConfig, generate, oracle_auc
from .training import TrainConfig, beta_sweep, run_matrix, train_variant

OUT_ENV = "FLATFORMER_OUT"
DEFAULT_OUT_ROOT = "runs"

log = logging.getLogger("flatformer")


@dataclass(frozen=True)
class DataConfig:
    gap_minutes: float = DEFAULT_GAP_MINUTES
    max_len: int = 200
    min_len: int = 3
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    eval_context: bool = True
    max_elapsed_s: float = 9999.0
    elapsed_source: str = "auto"

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if self.gap_minutes <= 0:
            raise ConfigError("gap must be positive")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError("split fractions must be three numbers summing to 1")
        if self.max_len < self.min_len:
            raise ConfigError("max_len must be >= min_len")


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "synth": SynthConfig}


# -- configuration -------------------------------------------------------------


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _flag_overrides(args) -> dict[str, Any]:
    """Flat ``section.key -> value`` overrides from dedicated flags and ``--set``."""
    out: dict[str, Any] = {}
    conflicts = []

    def put(key, value, source):
        if key in out and out[key] != value:
            conflicts.append(f"{key}: {out[key]!r} vs {value!r} ({source})")
        out[key] = value

    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        put(key.strip(), _parse_value(raw), "--set")
    if getattr(args, "variant", None) is not None:
        put("model.variant", args.variant, "--variant")
    if getattr(args, "beta", None) is not None:
        put("model.beta", args.beta, "--beta")
    if getattr(args, "gap_hours", None) is not None:
        put("data.gap_minutes", args.gap_hours * 60.0, "--gap-hours")
    if getattr(args, "max_len", None) is not None:
        put("data.max_len", args.max_len, "--max-len")
        put("model.max_len", args.max_len, "--max-len")
    if getattr(args, "seed", None) is not None:
        if args.command == "synth":
            put("synth.seed", args.seed, "--seed")
        else:
            put("train.seeds", [args.seed], "--seed")
    if conflicts:
        raise ConfigError("conflicting flags: " + "; ".join(conflicts))
    return out


def resolve_config(args) -> dict[str, dict[str, Any]]:
    """Merge defaults, config file and flags into per-section dicts."""
    file_cfg: dict[str, dict] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        unknown = set(file_cfg) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    resolved = {name: dict(file_cfg.get(name, {})) for name in SECTIONS}
    conflicts = []
    for key, value in _flag_overrides(args).items():
        section, _, field_name = key.partition(".")
        if section not in SECTIONS or field_name not in SECTIONS[section].__dataclass_fields__:
            raise ConfigError(f"unknown setting {key!r}")
        if field_name in file_cfg.get(section, {}) and file_cfg[section][field_name] != value:
            conflicts.append(f"{key}: config file has {file_cfg[section][field_name]!r}, flag gives {value!r}")
        resolved[section][field_name] = value
    if conflicts:
        raise ConfigError("flags conflict with config file: " + "; ".join(conflicts))
    return resolved


def build_configs(resolved: dict[str, dict]) -> dict[str, Any]:
    try:
        return {name: SECTIONS[name](**resolved[name]) for name in SECTIONS}
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# -- manifests ----------------------------------------------------------------


def file_hash(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict[str, str]:
    import scipy

    return {"flatformer": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict[str, Any]
    seed: Any
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    versions: dict[str, str] = field(default_factory=versions)

    def add_input(self, path) -> None:
        p = Path(path)
        if p.is_dir():
            for f in sorted(p.glob("*")):
                if f.is_file() and f.name != "manifest.json":
                    self.inputs[str(f)] = file_hash(f)
        elif p.exists():
            self.inputs[str(p)] = file_hash(p)

    def write(self, directory: str | os.PathLike) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str))
        return path


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT_ROOT)) / command


def _snapshot(configs: dict[str, Any], sections: Sequence[str]) -> dict:
    return {s: asdict(configs[s]) for s in sections}


# -- data loading ---------------------------------------------------------------


def _schema(args) -> LogSchema:
    if not getattr(args, "schema", None):
        return LogSchema()
    try:
        return LogSchema.from_json(args.schema)
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"cannot read schema {args.schema}: {exc}") from exc


def derive_dataset(log_path, schema: LogSchema, data: DataConfig):
    log_ = clean(parse_log(log_path, schema), data.max_elapsed_s, data.elapsed_source)
    if not log_.students:
        raise DataError(f"{log_path}: no interactions left after cleaning")
    seqs = build_sequences(log_, data.gap_minutes)
    split = split_by_sessions(seqs, data.fractions, data.max_len, data.min_len, data.eval_context)
    return log_, seqs, split


def load_split(args, configs, manifest: RunManifest) -> tuple[DatasetSplit, int, Any]:
    """Return (split, vocabulary size, synthetic dataset or None) from --data, --log or --synthetic."""
    data: DataConfig = configs["data"]
    if getattr(args, "data", None):
        d = Path(args.data)
        if not (d / "train.jsonl").exists():
            raise DataError(f"{d} does not look like a derived dataset (no train.jsonl)")
        manifest.add_input(d)
        split = DatasetSplit(read_shard(d / "train.jsonl"), read_shard(d / "validation.jsonl"),
                             read_shard(d / "test.jsonl"))
        vocab = json.loads((d / "vocab.json").read_text())
        return split, len(vocab), None
    if getattr(args, "log", None):
        manifest.add_input(args.log)
        log_, _, split = derive_dataset(args.log, _schema(args), data)
        return split, log_.n_exercises, None
    if getattr(args, "synthetic", False):
        ds = generate(configs["synth"])
        log_ = ds.interaction_log()
        seqs = build_sequences(log_, data.gap_minutes)
        split = split_by_sessions(seqs, data.fractions, data.max_len, data.min_len, data.eval_context)
        return split, log_.n_exercises, ds
    raise ConfigError("no input: pass --data DIR, --log FILE or --synthetic")


def _model_config(configs, n_exercises: int, resolved: dict) -> ModelConfig:
    mc: ModelConfig = configs["model"]
    if "n_exercises" in resolved["model"]:
        if mc.n_exercises < n_exercises:
            raise ConfigError(f"model.n_exercises={mc.n_exercises} is smaller than the data vocabulary {n_exercises}")
        return mc
    return mc.with_(n_exercises=n_exercises)


# -- commands -----------------------------------------------------------------


def _print_stats(stats: dict) -> None:
    print("dataset statistics")
    for k in ("students", "questions", "skills", "interactions", "avg_sessions", "avg_interactions_per_session"):
        v = stats[k]
        print(f"  {k:<30} {v:.2f}" if isinstance(v, float) else f"  {k:<30} {v}")


def cmd_derive(args, resolved, configs) -> int:
    out = _out_dir(args, "derive")
    manifest = RunManifest("derive", args.argv, _snapshot(configs, ["data"]), None)
    manifest.add_input(args.log)
    schema = _schema(args)
    log_, seqs, split = derive_dataset(args.log, schema, configs["data"])
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_shard(out / f"{name}.jsonl", getattr(split, name)) for name in ("train", "validation", "test")]
    (out / "vocab.json").write_text(json.dumps(log_.vocab, sort_keys=True))
    stats = dataset_statistics(log_, seqs)
    (out / "stats.json").write_text(json.dumps({"statistics": stats, "split": split.summary(),
                                                "reports": log_.reports()}, indent=2, sort_keys=True))
    (out / "split_manifest.json").write_text(json.dumps(split.manifest, indent=2, sort_keys=True))
    manifest.outputs = [str(p) for p in paths] + [str(out / n) for n in ("vocab.json", "stats.json",
                                                                      "split_manifest.json")]
    manifest.config["schema"] = asdict(schema)
    manifest.write(out)
    _print_stats(stats)
    print(f"split: {split.summary()}")
    print(f"wrote {out}")
    return 0


def cmd_synth(args, resolved, configs) -> int:
    out = _out_dir(args, "synth")
    cfg: SynthConfig = configs["synth"]
    ds = generate(cfg)
    log_path, hidden_path = ds.write(out)
    log_ = ds.interaction_log()
    stats = dataset_statistics(log_, build_sequences(log_, configs["data"].gap_minutes))
    stats["oracle_auc"] = oracle_auc(ds)
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    manifest = RunManifest("synth", args.argv, _snapshot(configs, ["synth", "data"]), cfg.seed,
                           outputs=[str(log_path), str(hidden_path), str(out / "stats.json")])
    manifest.write(out)
    _print_stats(stats)
    print(f"  {'oracle_auc':<30} {stats['oracle_auc']:.4f}")
    print(f"wrote {out}")
    return 0


def cmd_train(args, resolved, configs) -> int:
    out = _out_dir(args, "train")
    tc: TrainConfig = configs["train"]
    manifest = RunManifest("train", args.argv, {}, list(tc.seeds))
    split, n_ex, _ = load_split(args, configs, manifest)
    mc = _model_config(configs, n_ex, resolved)
    manifest.config = {"model": mc.to_dict(), **_snapshot(configs, ["train", "data"])}
    rows = []
    for seed in tc.seeds:
        run_dir = out / f"seed{seed}" if len(tc.seeds) > 1 else out
        rec, _ = train_variant(mc, split, tc, seed, run_dir)
        rows.append(rec)
        manifest.outputs.append(str(run_dir))
        print(f"seed {seed}: best epoch {rec.best_epoch}, val AUC {_fmt(rec.best_val_auc)}, "
              f"test AUC {_fmt(rec.test_auc)}, test ACC {_fmt(rec.test_acc)}")
    (out / "summary.json").write_text(json.dumps([r.to_dict() for r in rows], indent=2))
    manifest.write(out)
    return 0


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def cmd_eval(args, resolved, configs) -> int:
    out = _out_dir(args, "eval")
    manifest = RunManifest("eval", args.argv, {}, None)
    manifest.add_input(args.checkpoint)
    split, n_ex, _ = load_split(args, configs, manifest)
    params, cfg_dict, seed, _ = load_checkpoint(args.checkpoint)
    mc = ModelConfig.from_dict(cfg_dict)
    model = build_variant(mc, seed or 0)
    model.load_state_dict(params)
    seqs = getattr(split, args.split)
    if not seqs:
        raise DataError(f"split {args.split!r} is empty")
    report = evaluate(model, seqs, configs["train"].eval_batch_size, macro=args.macro)
    report.param_count = count_params(model)
    report.flops = flops_estimate(mc, mc.max_len)
    if args.latency:
        others = {"model": model}
        if mc.uses_forgetting:
            others["no_forgetting"] = build_variant(mc.with_(variant="no_forgetting"), seed or 0)
        report.latency = compare_latency(others, reps=args.latency)
    path = report.write_json(out / "eval.json")
    manifest.config = {"model": mc.to_dict(), "split": args.split}
    manifest.seed = seed
    manifest.outputs = [str(path)]
    manifest.write(out)
    print(f"{args.split}: AUC {_fmt(report.auc)}  ACC {_fmt(report.acc)}  n={report.n_predictions}")
    for row in report.length_buckets:
        print(f"  length {row['bucket']:>8}: n={row['count']:<7} AUC {_fmt(row['auc'])}")
    print(f"parameters: {report.param_count['total']}")
    return 0


def _print_table(key: str, rows: list[dict]) -> None:
    print(f"{key:<14} {'runs':>4} {'AUC':>16} {'ACC':>16}")
    for r in rows:
        auc = f"{_fmt(r['auc_mean'])}±{_fmt(r['auc_std'])}"
        acc = f"{_fmt(r['acc_mean'])}±{_fmt(r['acc_std'])}"
        print(f"{str(r[key]):<14} {r['runs']:>4} {auc:>16} {acc:>16}")


def cmd_ablate(args, resolved, configs) -> int:
    out = _out_dir(args, "ablate")
    tc: TrainConfig = configs["train"]
    manifest = RunManifest("ablate", args.argv, {}, list(tc.seeds))
    split, n_ex, ds = load_split(args, configs, manifest)
    mc = _model_config(configs, n_ex, resolved)
    manifest.config = {"model": mc.to_dict(), **_snapshot(configs, ["train", "data"]),
                       **({"synth": asdict(configs["synth"])} if ds else {})}
    res = run_matrix(split, args.variants, tc.seeds, mc, tc, out)
    manifest.outputs = [str(out / "ablation.json"), str(out / "ablation.csv")]
    manifest.write(out)
    _print_table("variant", res.rows)
    return 0


def cmd_sweep_beta(args, resolved, configs) -> int:
    out = _out_dir(args, "sweep-beta")
    tc: TrainConfig = configs["train"]
    manifest = RunManifest("sweep-beta", args.argv, {}, list(tc.seeds))
    split, n_ex, ds = load_split(args, configs, manifest)
    mc = _model_config(configs, n_ex, resolved)
    manifest.config = {"model": mc.to_dict(), **_snapshot(configs, ["train", "data"]),
                       **({"synth": asdict(configs["synth"])} if ds else {})}
    res = beta_sweep(split, tc.betas, tc.seeds, mc, tc, out)
    manifest.outputs = [str(out / "beta_curve.json"), str(out / "beta_curve.csv")]
    manifest.write(out)
    _print_table("beta", res.rows)
    return 0


def cmd_export_attention(args, resolved, configs) -> int:
    out = _out_dir(args, "export-attention")
    manifest = RunManifest("export-attention", args.argv, {}, None)
    manifest.add_input(args.checkpoint)
    split, _, _ = load_split(args, configs, manifest)
    params, cfg_dict, seed, _ = load_checkpoint(args.checkpoint)
    model = build_variant(ModelConfig.from_dict(cfg_dict), seed or 0)
    model.load_state_dict(params)
    seqs = getattr(split, args.split)
    if args.student is not None:
        seqs = [s for s in seqs if s.student_id == args.student]
        if not seqs:
            raise DataError(f"student {args.student!r} not found in split {args.split!r}")
    if not seqs:
        raise DataError(f"split {args.split!r} is empty")
    export = export_attention(model, seqs[min(args.index, len(seqs) - 1)])
    paths = export.write_csv(out)
    manifest.config = {"model": cfg_dict, "split": args.split, "student": export.student_id}
    manifest.seed = seed
    manifest.outputs = [str(p) for p in paths]
    manifest.write(out)
    print(f"student {export.student_id}: {export.n_layers} layers x {export.n_heads} heads, "
          f"boundaries at {export.session_boundaries}; wrote {len(paths)} attention CSVs to {out}")
    return 0


# -- argument parsing ---------------------------------------------------------------


def _common(p: argparse.ArgumentParser, data_inputs: bool = True) -> None:
    p.add_argument("--config", help="JSON config with model/train/data/synth sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=["full", "no_session", "no_forgetting", "backbone"])
    p.add_argument("--beta", type=float)
    p.add_argument("--gap-hours", type=float, dest="gap_hours")
    p.add_argument("--max-len", type=int, dest="max_len")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
    p.add_argument("--schema", help="JSON column mapping for the input log")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config value, e.g. train.epochs=20")
    if data_inputs:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--data", help="directory written by 'derive'")
        g.add_argument("--log", help="raw interaction log")
        g.add_argument("--synthetic", action="store_true", help="generate the synthetic dataset")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flatformer", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("derive", help="parse, clean, sessionise, window and split a log")
    _common(p, data_inputs=False)
    p.add_argument("--log", required=True)
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("synth", help="generate a synthetic log with hidden probabilities")
    _common(p, data_inputs=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one variant")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "validation", "test"])
    p.add_argument("--macro", action="store_true", help="also report per-student macro AUC")
    p.add_argument("--latency", type=int, default=0, metavar="REPS", help="run the latency benchmark")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the four variants over all seeds")
    _common(p)
    p.add_argument("--variants", nargs="+", default=["backbone", "no_session", "no_forgetting", "full"])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-beta", help="full-variant AUC across decay rates")
    _common(p)
    p.set_defaults(func=cmd_sweep_beta)

    p = sub.add_parser("export-attention", help="dump attention maps of one sequence as CSV")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "validation", "test"])
    p.add_argument("--student")
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        resolved = resolve_config(args)
        configs = build_configs(resolved)
        return args.func(args, resolved, configs)
    except FlatFormerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
