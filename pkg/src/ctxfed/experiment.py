"""Experiment specs: parsing, validation, execution and CSV output.

A spec is an INI file::

    [experiment]
    seed = 1
    trace_alphas = true

    [dataset]
    kind = synthetic          ; or idx / csv
    alpha = 1
    beta = 1

    [defaults]                ; shared by every run
    rounds = 100
    learning_rate = auto      ; 1 / largest Hessian eigenvalue at the start

    [run fedavg]
    scheme = fedavg

    [run contextual]
    scheme = fedavg_contextual
    k2 = N
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import os
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ctxfed.data import (
    FederatedDataset,
    SyntheticSpec,
    csv_device_count,
    generate_synthetic,
    load_csv_dir,
    load_idx,
    partition,
)
from ctxfed.engine import RoundRecord, RunConfig, RunError, rounds_to_accuracy, run
from ctxfed.errors import InvalidInputError, SpecError
from ctxfed.model import SoftmaxModel, estimate_smoothness

log = logging.getLogger(__name__)

OUTPUT_ENV = "CTXFED_OUTPUT_DIR"
ACCURACY_LEVELS = (0.5, 0.6, 0.7, 0.8)
METRIC_COLUMNS = [
    "round",
    "train_loss",
    "test_accuracy",
    "delta_norm",
    "bound_value",
    "selected_devices",
    "epochs",
]

_RUN_SECTION = re.compile(r"^run\s+(\S+)$")
_BOOL = {"true": True, "yes": True, "1": True, "on": True,
         "false": False, "no": False, "0": False, "off": False}

_SYNTHETIC_KEYS = {f.name: f.type for f in dataclasses.fields(SyntheticSpec)}
_IDX_KEYS = {
    "train_images": "path",
    "train_labels": "path",
    "test_images": "path",
    "test_labels": "path",
    "num_devices": "int",
    "shards_per_device": "int",
    "seed": "int",
}
_CSV_KEYS = {"path": "path", "num_classes": "int"}
_RUN_KEYS = {
    f.name: f.type for f in dataclasses.fields(RunConfig) if f.name not in ("seed", "scheme")
}
_RUN_KEYS["scheme"] = "str"


@dataclass
class DatasetSpec:
    kind: str
    options: dict


@dataclass
class RunSpec:
    name: str
    config: RunConfig
    auto_learning_rate: bool = False


@dataclass
class ExperimentSpec:
    dataset: DatasetSpec
    runs: list[RunSpec]
    output_dir: Path | None = None
    trace_alphas: bool = False
    seed: int = 0
    source: Path | None = field(default=None, repr=False)


# -- parsing -----------------------------------------------------------------


def _line_index(text: str) -> dict[tuple[str, str], int]:
    """Map (section, key) to its 1-based line number."""
    where, section = {}, None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            where[(section, "")] = lineno
        elif section and stripped and stripped[0] not in "#;" and "=" in stripped:
            where[(section, stripped.split("=", 1)[0].strip().lower())] = lineno
    return where


class _Reader:
    def __init__(self, path: Path, text: str):
        self.path = path
        self.lines = _line_index(text)
        self.problems: list[str] = []

    def where(self, section: str, key: str = "") -> str:
        line = self.lines.get((section, key)) or self.lines.get(("defaults", key))
        return f"{self.path}:{line}" if line else str(self.path)

    def error(self, section: str, key: str, message: str) -> None:
        label = f"[{section}] {key}" if key else f"[{section}]"
        self.problems.append(f"{self.where(section, key)}: {label}: {message}")

    def convert(self, section: str, key: str, raw: str, kind):
        kind = {int: "int", float: "float", bool: "bool", str: "str"}.get(kind, kind)
        text = raw.strip()
        try:
            if "None" in kind:
                if text.lower() in ("", "none"):
                    return None
                kind = kind.replace(" | None", "")
            if kind == "int":
                return int(text)
            if kind == "float":
                return float(text)
            if kind == "bool":
                return _BOOL[text.lower()]
            return text
        except (ValueError, KeyError):
            self.error(section, key, f"cannot read {text!r} as {kind}")
            return None


def _read_dataset(reader: _Reader, cp: configparser.ConfigParser, base: Path) -> DatasetSpec | None:
    if not cp.has_section("dataset"):
        reader.problems.append(f"{reader.path}: missing [dataset] section")
        return None
    items = dict(cp.items("dataset"))
    kind = items.pop("kind", "synthetic").strip()
    schema = {"synthetic": _SYNTHETIC_KEYS, "idx": _IDX_KEYS, "csv": _CSV_KEYS}.get(kind)
    if schema is None:
        reader.error("dataset", "kind", f"unknown dataset kind {kind!r} (synthetic, idx, csv)")
        return None
    options = {}
    for key, raw in items.items():
        if key not in schema:
            reader.error("dataset", key, f"unknown key for {kind} dataset")
            continue
        if schema[key] == "path":
            path = Path(raw.strip())
            options[key] = path if path.is_absolute() else base / path
        else:
            value = reader.convert("dataset", key, raw, schema[key])
            if value is not None:
                options[key] = value
    if kind == "idx":
        for key in ("train_images", "train_labels", "num_devices"):
            if key not in options:
                reader.error("dataset", "", f"idx dataset needs {key}")
        if ("test_images" in options) != ("test_labels" in options):
            reader.error("dataset", "", "test_images and test_labels go together")
        for key, value in options.items():
            if isinstance(value, Path) and not value.exists():
                reader.error("dataset", key, f"file not found: {value}")
    elif kind == "csv":
        if "path" not in options:
            reader.error("dataset", "", "csv dataset needs path")
        elif not options["path"].is_dir():
            reader.error("dataset", "path", f"directory not found: {options['path']}")
    else:
        for problem in SyntheticSpec(**options).problems():
            reader.error("dataset", "", problem)
    return DatasetSpec(kind, options)


def _num_devices(ds: DatasetSpec | None) -> int | None:
    if ds is None:
        return None
    if ds.kind == "synthetic":
        return ds.options.get("num_devices", SyntheticSpec.num_devices)
    if ds.kind == "idx":
        return ds.options.get("num_devices")
    path = ds.options.get("path")
    if path is not None and path.is_dir():
        try:
            return csv_device_count(path)
        except InvalidInputError:
            return None
    return None


def _read_run(reader, section: str, items: dict, seed: int) -> tuple[RunConfig | None, bool]:
    kwargs, auto_lr = {}, False
    for key, raw in items.items():
        if key == "seed":
            reader.error(section, key, "seeds are set once in [experiment] so runs share selections")
            continue
        if key not in _RUN_KEYS:
            reader.error(section, key, "unknown run option")
            continue
        if key == "k2" and raw.strip().lower() in ("n", "all"):
            kwargs[key] = None
            continue
        if key == "learning_rate" and raw.strip().lower() == "auto":
            auto_lr = True
            continue
        value = reader.convert(section, key, raw, _RUN_KEYS[key])
        if value is not None or key in ("k2", "beta_override", "pool_size"):
            kwargs[key] = value
    if "scheme" not in kwargs:
        reader.error(section, "", "missing scheme")
        return None, auto_lr
    if auto_lr:
        kwargs["learning_rate"] = 1.0
    try:
        return RunConfig(seed=seed, **kwargs), auto_lr
    except TypeError as exc:
        reader.error(section, "", str(exc))
        return None, auto_lr


def parse_spec(path) -> tuple[ExperimentSpec | None, list[str]]:
    """Parse and validate without executing; returns the spec and every problem found."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        return None, [f"{path}: {exc}"]
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        return None, [str(exc).replace("\n", " ")]
    reader = _Reader(path, text)
    base = path.parent

    exp = dict(cp.items("experiment")) if cp.has_section("experiment") else {}
    seed, trace, out = 0, False, None
    for key, raw in exp.items():
        if key == "seed":
            seed = reader.convert("experiment", key, raw, "int") or 0
        elif key == "trace_alphas":
            trace = bool(reader.convert("experiment", key, raw, "bool"))
        elif key == "output_dir":
            out = Path(raw.strip())
            out = out if out.is_absolute() else base / out
        else:
            reader.error("experiment", key, "unknown experiment option")

    dataset = _read_dataset(reader, cp, base)
    num_devices = _num_devices(dataset)

    defaults = dict(cp.items("defaults")) if cp.has_section("defaults") else {}
    runs, names = [], set()
    for section in cp.sections():
        if section in ("experiment", "dataset", "defaults"):
            continue
        match = _RUN_SECTION.match(section)
        if not match:
            reader.error(section, "", "unknown section (expected [run <name>])")
            continue
        name = match.group(1)
        if name in names:
            reader.error(section, "", f"duplicate run name {name!r}")
        names.add(name)
        items = {**defaults, **dict(cp.items(section))}
        config, auto_lr = _read_run(reader, section, items, seed)
        if config is None:
            continue
        for problem in config.problems(num_devices):
            reader.error(section, "", problem)
        runs.append(RunSpec(name, config, auto_lr))
    if not names:
        reader.problems.append(f"{path}: no [run <name>] sections")
    if reader.problems:
        return None, reader.problems
    return ExperimentSpec(dataset, runs, out, trace, seed, path), []


def validate_spec(path) -> list[str]:
    return parse_spec(path)[1]


def load_spec(path) -> ExperimentSpec:
    spec, problems = parse_spec(path)
    if problems:
        raise SpecError(problems)
    return spec


# -- datasets ----------------------------------------------------------------


def build_dataset(ds: DatasetSpec) -> FederatedDataset:
    opts = ds.options
    if ds.kind == "synthetic":
        return generate_synthetic(SyntheticSpec(**opts))
    if ds.kind == "csv":
        return load_csv_dir(opts["path"], opts.get("num_classes"))
    train = load_idx(opts["train_images"], opts["train_labels"])
    test = load_idx(opts["test_images"], opts["test_labels"]) if "test_images" in opts else None
    return partition(
        train,
        opts["num_devices"],
        opts.get("shards_per_device", 2),
        opts.get("seed", 0),
        test=test,
        num_classes=10,
    )


def auto_learning_rate(data: FederatedDataset) -> float:
    """``1 / beta`` with ``beta`` the largest Hessian eigenvalue of the loss at zero."""
    beta = estimate_smoothness(SoftmaxModel(data.num_classes, data.num_features), data.pooled)
    return 1.0 / beta


# -- output ------------------------------------------------------------------


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return f"{float(value):.17g}"


def write_metrics(path: Path, records: list[RoundRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([
                r.round,
                fmt(r.train_loss),
                fmt(r.test_accuracy),
                fmt(r.combined_delta_norm),
                fmt(r.bound_value),
                " ".join(str(i) for i in r.selected_devices),
                " ".join(str(r.epochs_per_device[i]) for i in r.selected_devices),
            ])


def write_alphas(path: Path, records: list[RoundRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "device_id", "alpha"])
        for r in records:
            for device, alpha in sorted((r.alphas or {}).items()):
                w.writerow([r.round, device, fmt(alpha)])


def write_summary(path: Path, rows: list[tuple[str, str, list[RoundRecord]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "scheme"] + [f"rounds_to_{level:g}" for level in ACCURACY_LEVELS])
        for name, scheme, records in rows:
            w.writerow(
                [name, scheme] + [fmt(rounds_to_accuracy(records, lv)) for lv in ACCURACY_LEVELS]
            )


# -- execution ---------------------------------------------------------------


def resolve_output_dir(spec: ExperimentSpec, override=None) -> Path:
    if override is not None:
        return Path(override)
    if spec.output_dir is not None:
        return spec.output_dir
    return Path(os.environ.get(OUTPUT_ENV, "results"))


def run_experiment(spec: ExperimentSpec, out_dir=None, seed: int | None = None) -> int:
    """Execute every run against one shared dataset; 0 iff no run aborted."""
    out = resolve_output_dir(spec, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = build_dataset(spec.dataset)
    auto_lr = None
    status, finished = 0, []
    for rs in spec.runs:
        cfg = rs.config
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
        if rs.auto_learning_rate:
            if auto_lr is None:
                auto_lr = auto_learning_rate(data)
                log.info("learning_rate = auto resolved to %.6g", auto_lr)
            cfg = dataclasses.replace(cfg, learning_rate=auto_lr)
        final = out / rs.name
        partial = out / f".{rs.name}.partial"
        shutil.rmtree(partial, ignore_errors=True)
        partial.mkdir()
        log.info("run %s (%s)", rs.name, cfg.scheme)
        try:
            records = run(cfg, data)
            write_metrics(partial / "metrics.csv", records)
            if spec.trace_alphas:
                write_alphas(partial / "alphas.csv", records)
        except (RunError, InvalidInputError, OSError) as exc:
            log.error("run %s aborted: %s", rs.name, exc)
            shutil.rmtree(partial, ignore_errors=True)
            status = 1
            continue
        shutil.rmtree(final, ignore_errors=True)
        partial.rename(final)
        finished.append((rs.name, cfg.scheme, records))
    write_summary(out / "summary.csv", finished)
    return status
