"""Command-line surface: synth, train, eval, and the ablation harness.

One run is described by a RunConfig JSON file; every hyperparameter in it
can be overridden by a flag. Commands write their artifacts into an output
directory and exit 0 only when everything requested was written. All
delimited outputs carry a schema_version field.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import multiprocessing
import os
import sys

import numpy as np

from .data import (
    RawDataset,
    SynthSpec,
    default_synth_spec,
    generate_synthetic,
    load_csv,
    normalize,
    save_csv,
    windowize,
)
from .errors import ConfigError, ContractError, RestadError
from .metrics import LabeledScores, evaluate
from .model import ModelConfig, RestadModel, load_checkpoint, save_checkpoint
from .scoring import CRITERIA, retarget, score_model
from .training import TrainConfig, fit, train_restad_kmeans

RUNCONFIG_SCHEMA_VERSION = 1
ABLATION_SCHEMA_VERSION = 1

AXES = ("criterion", "rbf_position", "n_centers")
INIT_MODES = ("kmeans", "random")

_MODEL_KEYS = tuple(
    f.name for f in dataclasses.fields(ModelConfig) if f.name != "input_dim"
)
_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
_SYNTH_KEYS = tuple(f.name for f in dataclasses.fields(SynthSpec))

METRIC_KEYS = ("f1", "auc_roc", "auc_pr", "vus_roc", "vus_pr")

ABLATION_COLUMNS = (
    ("schema_version", "axis", "value", "row_type", "repeat", "seed", "status", "error")
    + METRIC_KEYS
    + tuple(f"{k}_std" for k in METRIC_KEYS)
)


# ---------------------------------------------------------------- config


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Everything one run needs: data source, model, training, scoring.

    `data` holds exactly one of {"csv_dir": path} or {"synth": spec-dict}.
    The run seed fills any model/train/synth seed not set explicitly.
    """

    data: dict
    model: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)
    init: str = "kmeans"
    criterion: str = "r_times_s"
    anomaly_ratio: float = 0.022
    max_buffer: int = 4
    out_dir: str = "run-out"
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.init not in INIT_MODES:
            raise ConfigError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if self.criterion not in CRITERIA:
            raise ConfigError(
                f"criterion must be one of {CRITERIA}, got {self.criterion!r}"
            )
        if not 0.0 < self.anomaly_ratio < 1.0:
            raise ConfigError(
                f"anomaly_ratio must lie in (0, 1), got {self.anomaly_ratio}"
            )
        if not isinstance(self.max_buffer, int) or self.max_buffer < 0:
            raise ConfigError(
                f"max_buffer must be a non-negative integer, got {self.max_buffer!r}"
            )
        if not isinstance(self.data, dict) or set(self.data) not in (
            {"csv_dir"},
            {"synth"},
        ):
            raise ConfigError(
                "data must name exactly one source: {'csv_dir': ...} or {'synth': ...},"
                f" got {sorted(self.data) if isinstance(self.data, dict) else self.data!r}"
            )
        _check_keys("model", self.model, _MODEL_KEYS)
        _check_keys("train", self.train, _TRAIN_KEYS)
        if "synth" in self.data:
            _parse_synth_spec(self.data["synth"], seed=self.seed)
        # sub-configs must already be valid; input_dim is resolved from the
        # data later, so a placeholder width stands in for the check
        ModelConfig(input_dim=1, **{"seed": self.seed, **self.model})
        TrainConfig(**{"seed": self.seed, **self.train})

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["schema_version"] = RUNCONFIG_SCHEMA_VERSION
        return doc


def _check_keys(section: str, doc, allowed) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{section} must be a JSON object, got {doc!r}")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {section} key(s): {', '.join(unknown)}")


def parse_run_config(doc: dict) -> RunConfig:
    _check_sv("run config", doc, RUNCONFIG_SCHEMA_VERSION)
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    body = {k: v for k, v in doc.items() if k != "schema_version"}
    _check_keys("run config", body, fields)
    if "data" not in body:
        raise ConfigError("run config is missing the data section")
    return RunConfig(**body)


def _check_sv(what: str, doc: dict, expected: int) -> None:
    sv = doc.get("schema_version", expected)
    if sv != expected:
        raise ConfigError(f"{what}: unsupported schema_version {sv!r} (expected {expected})")


def _parse_synth_spec(doc, seed: int | None = None) -> SynthSpec:
    """Build a SynthSpec from a JSON document.

    Either {"preset": "benchmark", ...seed/train_length} for the bundled
    generator or explicit SynthSpec fields. Unknown keys are named in the
    error so a typo is findable.
    """
    if not isinstance(doc, dict):
        raise ConfigError(f"synth spec must be a JSON object, got {doc!r}")
    doc = dict(doc)
    if doc.get("preset") == "benchmark":
        doc.pop("preset")
        _check_keys("synth spec", doc, ("seed", "train_length"))
        kwargs = {"seed": doc.get("seed", 0 if seed is None else seed)}
        if "train_length" in doc:
            kwargs["train_length"] = doc["train_length"]
        return default_synth_spec(**kwargs)
    if "preset" in doc:
        raise ConfigError(f"unknown synth preset {doc['preset']!r} (only 'benchmark')")
    _check_keys("synth spec", doc, _SYNTH_KEYS)
    if seed is not None:
        doc.setdefault("seed", seed)
    return SynthSpec(**doc)


def _load_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")


def _resolve_dataset(cfg: RunConfig) -> RawDataset:
    if "csv_dir" in cfg.data:
        return load_csv(cfg.data["csv_dir"])
    return generate_synthetic(_parse_synth_spec(cfg.data["synth"], seed=cfg.seed))


def _model_config(cfg: RunConfig, input_dim: int, **overrides) -> ModelConfig:
    params = dict(cfg.model)
    params.setdefault("seed", cfg.seed)
    params.update(overrides)
    return ModelConfig(input_dim=input_dim, **params)


def _train_config(cfg: RunConfig, **overrides) -> TrainConfig:
    params = dict(cfg.train)
    params.setdefault("seed", cfg.seed)
    params.update(overrides)
    return TrainConfig(**params)


# ---------------------------------------------------------------- commands


def cmd_synth(spec: SynthSpec, out_dir: str) -> list[str]:
    """Generate a synthetic dataset and write the three CSV files."""
    raw = generate_synthetic(spec)
    os.makedirs(out_dir, exist_ok=True)
    return save_csv(raw, out_dir)


def cmd_train(cfg: RunConfig) -> dict:
    """Train per the run config; write checkpoint.json and trainlog.jsonl."""
    raw = _resolve_dataset(cfg)
    norm = normalize(raw)
    model_config = _model_config(cfg, raw.n_features)
    train_config = _train_config(cfg)
    windows = windowize(norm.train, model_config.window_len).windows

    if model_config.rbf_enabled and cfg.init == "kmeans":
        model, logs = train_restad_kmeans(windows, model_config, train_config)
        phases = [("base", logs["base"]), ("full", logs["full"])]
    else:
        # vanilla baseline, or RESTAD with random centers: one phase
        model = RestadModel(model_config)
        log = fit(model, windows, train_config)
        phases = [("base" if not model_config.rbf_enabled else "full", log)]

    os.makedirs(cfg.out_dir, exist_ok=True)
    checkpoint = os.path.join(cfg.out_dir, "checkpoint.json")
    trainlog = os.path.join(cfg.out_dir, "trainlog.jsonl")
    save_checkpoint(model, checkpoint)
    with open(trainlog, "w", encoding="ascii") as f:
        for phase, log in phases:
            for record in log.records:
                f.write(json.dumps({**record, "phase": phase}, sort_keys=True) + "\n")
    return {"checkpoint": checkpoint, "trainlog": trainlog}


def cmd_eval(
    checkpoint: str,
    raw: RawDataset,
    criteria: list[str],
    anomaly_ratio: float,
    max_buffer: int,
    out_dir: str,
) -> dict:
    """Score once, then emit a report, trace, and figure per criterion."""
    model = load_checkpoint(checkpoint)
    if raw.n_features != model.config.input_dim:
        raise ContractError(
            f"dataset has {raw.n_features} feature(s) but the checkpoint expects"
            f" {model.config.input_dim}"
        )
    norm = normalize(raw)
    wte = windowize(norm.test, model.config.window_len)
    labels = raw.test_labels[: wte.covered_length]

    trace = score_model(model, wte.windows, criterion=criteria[0], labels=labels)
    os.makedirs(out_dir, exist_ok=True)
    from . import report as report_mod

    artifacts = {}
    for criterion in criteria:
        current = trace if criterion == trace.criterion else retarget(trace, criterion)
        ls = LabeledScores(current.composite, labels)
        rep = evaluate(ls, anomaly_ratio, max_buffer=max_buffer)
        report_path = os.path.join(out_dir, f"report_{criterion}.json")
        trace_path = os.path.join(out_dir, f"trace_{criterion}.csv")
        figure_path = os.path.join(out_dir, f"score_trace_{criterion}.png")
        with open(report_path, "w", encoding="ascii") as f:
            f.write(rep.to_json())
        current.to_csv(trace_path)
        report_mod.save_score_figure(current, figure_path, title=f"criterion {criterion}")
        artifacts[criterion] = {
            "report": report_path,
            "trace": trace_path,
            "figure": figure_path,
        }
    return artifacts


# ---------------------------------------------------------------- ablation


@dataclasses.dataclass(frozen=True)
class AblationGrid:
    axis: str
    values: tuple
    base: RunConfig
    repeats: int = 1
    out_dir: str = "ablation-out"

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"axis must be one of {AXES}, got {self.axis!r}")
        if not self.values:
            raise ConfigError("values must be a non-empty list")
        if self.axis == "criterion":
            bad = [v for v in self.values if v not in CRITERIA]
            if bad:
                raise ConfigError(f"criterion values not recognized: {bad}")
        else:
            bad = [v for v in self.values if not isinstance(v, int) or v < 1]
            if bad:
                raise ConfigError(f"{self.axis} values must be positive integers: {bad}")
        if not isinstance(self.repeats, int) or self.repeats < 1:
            raise ConfigError(f"repeats must be a positive integer, got {self.repeats!r}")


def parse_grid(doc: dict) -> AblationGrid:
    _check_sv("ablation grid", doc, ABLATION_SCHEMA_VERSION)
    body = {k: v for k, v in doc.items() if k != "schema_version"}
    _check_keys(
        "ablation grid", body, ("axis", "values", "repeats", "base", "out_dir")
    )
    for key in ("axis", "values", "base"):
        if key not in body:
            raise ConfigError(f"ablation grid is missing {key}")
    base_doc = dict(body.pop("base"))
    # unlike train runs, sweep cells default to single-phase random init
    base_doc.setdefault("init", "random")
    base = parse_run_config(base_doc)
    return AblationGrid(base=base, **{**body, "values": tuple(body["values"])})


def _cell_seed(base_seed: int, value_index: int, repeat: int) -> int:
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(value_index, repeat))
    return int(ss.generate_state(1)[0])


def _metric_values(rep) -> dict:
    return {k: getattr(rep, k) for k in METRIC_KEYS}


def _run_unit(args) -> list[dict]:
    """One training unit: (value, repeat) for model axes, or one repeat
    shared across every criterion for the criterion axis (the criterion is
    a scoring-time choice, so retraining per criterion would only add
    noise). Failures become failed rows; the grid keeps going."""
    grid, value_index, repeat = args
    cfg = grid.base

    if grid.axis == "criterion":
        seed = _cell_seed(cfg.seed, 0, repeat)
        row_keys = [(v, i) for i, v in enumerate(grid.values)]
        overrides = {}
        criteria = list(grid.values)
    else:
        seed = _cell_seed(cfg.seed, value_index, repeat)
        value = grid.values[value_index]
        row_keys = [(value, value_index)]
        overrides = {grid.axis: value}
        criteria = [cfg.criterion]

    def rows(status, metrics_by_value=None, error=""):
        out = []
        for (value, vi), metrics in zip(
            row_keys, metrics_by_value or [None] * len(row_keys)
        ):
            out.append(
                {
                    "axis": grid.axis,
                    "value": value,
                    "value_index": vi,
                    "row_type": "cell",
                    "repeat": repeat,
                    "seed": seed,
                    "status": status,
                    "error": error,
                    **(metrics or {}),
                }
            )
        return out

    try:
        raw = _resolve_dataset(cfg)
        norm = normalize(raw)
        model_config = _model_config(cfg, raw.n_features, seed=seed, **overrides)
        train_config = _train_config(cfg, seed=seed)
        windows = windowize(norm.train, model_config.window_len).windows
        if model_config.rbf_enabled and cfg.init == "kmeans":
            model, _ = train_restad_kmeans(windows, model_config, train_config)
        else:
            model = RestadModel(model_config)
            fit(model, windows, train_config)

        wte = windowize(norm.test, model_config.window_len)
        labels = raw.test_labels[: wte.covered_length]
        trace = score_model(model, wte.windows, criterion=criteria[0], labels=labels)
        metrics_by_value = []
        for criterion in criteria:
            current = trace if criterion == trace.criterion else retarget(trace, criterion)
            rep = evaluate(
                LabeledScores(current.composite, labels),
                cfg.anomaly_ratio,
                max_buffer=cfg.max_buffer,
            )
            metrics_by_value.append(_metric_values(rep))
        return rows("ok", metrics_by_value)
    except Exception as e:  # a failed cell must not sink the grid
        return rows("failed", error=f"{type(e).__name__}: {e}")


def cmd_ablate(grid: AblationGrid, out_dir: str, parallel: int = 1) -> dict:
    """Run every cell, then write ablation.csv plus the axis figure.

    Cell rows come first (ordered by value then repeat), followed by one
    aggregate row per value with metric means and population stds over
    the repeats that succeeded.
    """
    if grid.axis == "criterion":
        units = [(grid, 0, r) for r in range(grid.repeats)]
    else:
        units = [
            (grid, vi, r)
            for vi in range(len(grid.values))
            for r in range(grid.repeats)
        ]
    if parallel > 1:
        with multiprocessing.Pool(parallel) as pool:
            results = pool.map(_run_unit, units)
    else:
        results = [_run_unit(u) for u in units]

    cells = sorted(
        (row for unit in results for row in unit),
        key=lambda r: (r["value_index"], r["repeat"]),
    )

    aggregates = []
    for vi, value in enumerate(grid.values):
        group = [r for r in cells if r["value_index"] == vi]
        ok = [r for r in group if r["status"] == "ok"]
        agg = {
            "axis": grid.axis,
            "value": value,
            "value_index": vi,
            "row_type": "aggregate",
            "repeat": "",
            "seed": "",
            "status": "ok" if ok else "failed",
            "error": "" if ok else "no completed repeats",
        }
        if ok:
            for key in METRIC_KEYS:
                samples = np.array([r[key] for r in ok], dtype=np.float64)
                agg[key] = float(samples.mean())
                agg[f"{key}_std"] = float(samples.std())
        aggregates.append(agg)

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "ablation.csv")
    figure_path = os.path.join(out_dir, f"ablation_{grid.axis}.png")
    _write_ablation_csv(cells + aggregates, csv_path)
    from . import report as report_mod

    report_mod.save_ablation_figure(aggregates, grid.axis, figure_path)
    return {"csv": csv_path, "figure": figure_path}


def _write_ablation_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            record = []
            for col in ABLATION_COLUMNS:
                if col == "schema_version":
                    record.append(ABLATION_SCHEMA_VERSION)
                    continue
                v = row.get(col, "")
                record.append(repr(v) if isinstance(v, float) else v)
            writer.writerow(record)


# ---------------------------------------------------------------- argparse


def _bool_flag(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


_MODEL_FLAGS = {
    "window-len": ("window_len", int),
    "d-model": ("d_model", int),
    "ffn-dim": ("ffn_dim", int),
    "n-heads": ("n_heads", int),
    "n-layers": ("n_layers", int),
    "rbf-enabled": ("rbf_enabled", _bool_flag),
    "rbf-position": ("rbf_position", int),
    "n-centers": ("n_centers", int),
    "dropout": ("dropout", float),
}

_TRAIN_FLAGS = {
    "lr": ("learning_rate", float),
    "batch-size": ("batch_size", int),
    "epochs": ("epochs", int),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="restad",
        description="Transformer anomaly detection with an RBF similarity layer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset as CSV files")
    p_synth.add_argument("--spec", help="synth spec JSON (default: bundled benchmark)")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument(
        "--seed", type=int, help="override the seed from the --spec file"
    )
    p_synth.add_argument(
        "--train-length", type=int, help="override the train length from the --spec file"
    )

    p_train = sub.add_parser("train", help="train a model from a run config")
    p_train.add_argument("--config", required=True, help="RunConfig JSON file")
    p_train.add_argument("--out", help="override out_dir")
    p_train.add_argument("--seed", type=int, help="override the run seed")
    p_train.add_argument("--init", choices=INIT_MODES, help="center initialization")
    p_train.add_argument("--criterion", help="override the scoring criterion")
    p_train.add_argument("--anomaly-ratio", type=float, help="override anomaly ratio")
    p_train.add_argument("--max-buffer", type=int, help="override VUS max buffer")
    for flag, (_, parse) in _MODEL_FLAGS.items():
        p_train.add_argument(f"--{flag}", type=parse, help=f"override model {flag}")
    for flag, (_, parse) in _TRAIN_FLAGS.items():
        p_train.add_argument(f"--{flag}", type=parse, help=f"override training {flag}")
    p_train.add_argument(
        "--print-config",
        action="store_true",
        help="print the effective run config as JSON and exit",
    )

    p_eval = sub.add_parser("eval", help="score a checkpoint and write reports")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", help="dataset directory (train/test/labels CSVs)")
    p_eval.add_argument("--synth-spec", help="synth spec JSON instead of --data")
    p_eval.add_argument(
        "--criterion",
        default="r_times_s",
        help="criterion name, comma list, or 'all' (one score pass serves all)",
    )
    p_eval.add_argument("--anomaly-ratio", type=float, default=0.022)
    p_eval.add_argument("--max-buffer", type=int, default=4)
    p_eval.add_argument("--seed", type=int, default=0, help="seed for --synth-spec")
    p_eval.add_argument("--out", required=True)

    p_ablate = sub.add_parser("ablate", help="run an ablation grid")
    p_ablate.add_argument("--grid", required=True, help="AblationGrid JSON file")
    p_ablate.add_argument("--out", help="override the grid's out_dir")
    p_ablate.add_argument(
        "--parallel", type=int, default=1, help="independent cells run in N processes"
    )
    return parser


def _merged_run_config(args) -> RunConfig:
    doc = _load_json(args.config)
    cfg = parse_run_config(doc)
    updates = {}
    for attr, key in (
        ("out", "out_dir"),
        ("seed", "seed"),
        ("init", "init"),
        ("criterion", "criterion"),
        ("anomaly_ratio", "anomaly_ratio"),
        ("max_buffer", "max_buffer"),
    ):
        v = getattr(args, attr)
        if v is not None:
            updates[key] = v
    model = dict(cfg.model)
    for flag, (key, _) in _MODEL_FLAGS.items():
        v = getattr(args, flag.replace("-", "_"))
        if v is not None:
            model[key] = v
    train = dict(cfg.train)
    for flag, (key, _) in _TRAIN_FLAGS.items():
        v = getattr(args, flag.replace("-", "_"))
        if v is not None:
            train[key] = v
    if model != cfg.model:
        updates["model"] = model
    if train != cfg.train:
        updates["train"] = train
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _eval_criteria(text: str) -> list[str]:
    if text == "all":
        return list(CRITERIA)
    names = [c.strip() for c in text.split(",") if c.strip()]
    if not names:
        raise ConfigError("criterion list is empty")
    unknown = [c for c in names if c not in CRITERIA]
    if unknown:
        raise ConfigError(f"unknown criterion name(s): {', '.join(unknown)}")
    seen = []
    for name in names:
        if name not in seen:
            seen.append(name)
    return seen


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            if args.spec:
                doc = _load_json(args.spec)
                if isinstance(doc, dict) and doc.get("preset") == "benchmark":
                    # apply overrides before expansion so the anomaly layout
                    # follows the effective seed, not the file's
                    if args.seed is not None:
                        doc["seed"] = args.seed
                    if args.train_length is not None:
                        doc["train_length"] = args.train_length
                    spec = _parse_synth_spec(doc)
                else:
                    spec = _parse_synth_spec(doc)
                    replacements = {}
                    if args.seed is not None:
                        replacements["seed"] = args.seed
                    if args.train_length is not None:
                        replacements["train_length"] = args.train_length
                    if replacements:
                        spec = dataclasses.replace(spec, **replacements)
            else:
                spec = default_synth_spec(
                    seed=0 if args.seed is None else args.seed,
                    **(
                        {}
                        if args.train_length is None
                        else {"train_length": args.train_length}
                    ),
                )
            for path in cmd_synth(spec, args.out):
                print(path)
        elif args.command == "train":
            cfg = _merged_run_config(args)
            if args.print_config:
                print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
                return 0
            artifacts = cmd_train(cfg)
            for path in artifacts.values():
                print(path)
        elif args.command == "eval":
            if (args.data is None) == (args.synth_spec is None):
                raise ConfigError("pass exactly one of --data or --synth-spec")
            if args.data is not None:
                raw = load_csv(args.data)
            else:
                spec = _parse_synth_spec(_load_json(args.synth_spec), seed=args.seed)
                raw = generate_synthetic(spec)
            artifacts = cmd_eval(
                args.checkpoint,
                raw,
                _eval_criteria(args.criterion),
                args.anomaly_ratio,
                args.max_buffer,
                args.out,
            )
            for group in artifacts.values():
                for path in group.values():
                    print(path)
        elif args.command == "ablate":
            grid = parse_grid(_load_json(args.grid))
            out_dir = args.out if args.out is not None else grid.out_dir
            if args.parallel < 1:
                raise ConfigError(f"--parallel must be >= 1, got {args.parallel}")
            artifacts = cmd_ablate(grid, out_dir, parallel=args.parallel)
            for path in artifacts.values():
                print(path)
    except RestadError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
