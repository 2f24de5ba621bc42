"""Experiment harness: configuration, pretraining, tuning cells, sweeps, reports.

A configuration is a JSON document::

    {
      "name": "patch",
      "dataset": {"structure": "OneSidedPatch", "n_tune": 1200},
      "model": null,
      "pretrain": {"epochs": 10, "seeds": [0, 1, 2]},
      "methods": [{"method": "ChangePenalized"}, {"method": "FineTune"}],
      "grid": {"norms": ["L1", "L2"], "lambdas": [1.0, 10.0], "epsilons": [5]},
      "b_grid": [1, 2, 4, 8, 16, 32],
      "batches_per_model": 5,
      "output_dir": "runs/patch",
      "workers": 1
    }

``dataset`` may instead name an ``image_folder`` (plus ``contradicting``
pairs).  ``grid`` expands into extra ChangePenalized methods.  Unknown keys
anywhere are rejected.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from .autodiff import ParamSet
from .datagen import BiasSpec, DatasetBundle, export_image_folder, generate, load_image_folder
from .metrics import aggregate, metrics_report, norm_report
from .network import ModelSpec, default_spec, forward
from .penalty import NormKind, PenaltyConfig
from .training import PretrainConfig, pretrain
from .tuner import (BASELINE_LR, BASELINE_MOMENTUM, BASELINE_WEIGHT_DECAY, CP_LR, CP_MOMENTUM, Method,
                    StoppingPolicy, TuneConfig, select_contradicting, tune, tuned_logits_fn)

RESULTS_VERSION = "deltatune-results/1"
AGGREGATE_VERSION = "deltatune-aggregate/1"

RESULT_COLUMNS = [
    "dataset", "method", "lr", "norm_kind", "lambda", "epsilon", "b", "model_seed", "batch_index",
    "steps_taken", "converged", "acc_before", "acc_after", "bacc_before", "bacc_after",
    "delta_l1", "delta_l2", "norm_diff", "sparsity_frac", "error",
]
_KEY_COLUMNS = ["dataset", "method", "lr", "norm_kind", "lambda", "epsilon", "b"]
_INT_COLUMNS = {"epsilon", "b", "model_seed", "batch_index", "steps_taken", "converged"}
_FLOAT_COLUMNS = {"lr", "lambda", "acc_before", "acc_after", "bacc_before", "bacc_after",
                  "delta_l1", "delta_l2", "norm_diff", "sparsity_frac"}
REPORT_METRICS = ["d_bacc", "d_acc", "steps_taken", "converged", "delta_l1", "delta_l2", "norm_diff", "sparsity_frac"]


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 1)."""


class ReportError(ValueError):
    pass


def _reject_unknown(d: dict, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class MethodSpec:
    """One tuning configuration of the sweep."""

    method: Method
    lr: float
    momentum: float
    weight_decay: float
    norm: Optional[NormKind] = None
    lam: Optional[float] = None
    epsilon: int = 0
    max_steps: int = 500
    lambda_mas: Optional[float] = None

    _KEYS = ("method", "lr", "momentum", "weight_decay", "norm", "lambda", "epsilon", "max_steps", "lambda_mas")

    @classmethod
    def from_dict(cls, d: dict) -> "MethodSpec":
        _reject_unknown(d, cls._KEYS, "method")
        try:
            method = Method(d.get("method"))
        except ValueError:
            raise ConfigError(f"unknown method {d.get('method')!r}; expected one of {[m.value for m in Method]}") from None
        cp = method is Method.CHANGE_PENALIZED
        if not cp and ("norm" in d or "lambda" in d):
            raise ConfigError(f"{method.value}: norm/lambda apply to ChangePenalized only")
        if method is not Method.MAS and "lambda_mas" in d:
            raise ConfigError(f"{method.value}: lambda_mas applies to MAS only")
        try:
            spec = cls(
                method=method,
                lr=float(d.get("lr", CP_LR if cp else BASELINE_LR)),
                momentum=float(d.get("momentum", CP_MOMENTUM if cp else BASELINE_MOMENTUM)),
                weight_decay=float(d.get("weight_decay", 0.0 if cp else BASELINE_WEIGHT_DECAY)),
                norm=NormKind(d.get("norm", "Combined")) if cp else None,
                lam=float(d.get("lambda", 1.0)) if cp else None,
                epsilon=int(d.get("epsilon", 0)),
                max_steps=int(d.get("max_steps", 500)),
                lambda_mas=float(d.get("lambda_mas", 1.0)) if method is Method.MAS else None,
            )
            spec.tune_config(0)
        except ValueError as e:
            raise ConfigError(f"method {d}: {e}") from None
        return spec

    def to_dict(self) -> dict:
        d = {"method": self.method.value, "lr": self.lr, "momentum": self.momentum,
             "weight_decay": self.weight_decay, "epsilon": self.epsilon, "max_steps": self.max_steps}
        if self.norm is not None:
            d["norm"] = self.norm.value
            d["lambda"] = self.lam
        if self.lambda_mas is not None:
            d["lambda_mas"] = self.lambda_mas
        return d

    def tune_config(self, seed: int = 0) -> TuneConfig:
        return TuneConfig(
            self.method, self.lr, self.momentum, self.weight_decay,
            penalty=PenaltyConfig(self.norm, self.lam) if self.norm is not None else None,
            lambda_mas=self.lambda_mas,
            stopping=StoppingPolicy(self.epsilon, self.max_steps),
            seed=seed,
        )

    @property
    def label(self) -> str:
        if self.method is Method.CHANGE_PENALIZED:
            return f"{self.method.value}[{self.norm.value},lam={self.lam:g}]"
        return self.method.value


@dataclass(frozen=True)
class PretrainSettings:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seeds: tuple = (0, 1, 2)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainSettings":
        _reject_unknown(d, cls.__dataclass_fields__, "pretrain")
        d = dict(d)
        if "seeds" in d:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
        s = cls(**d)
        if len(set(s.seeds)) != len(s.seeds) or not s.seeds:
            raise ConfigError(f"pretrain seeds must be distinct and non-empty, got {list(s.seeds)}")
        if s.epochs < 1 or s.batch_size < 1 or s.lr <= 0:
            raise ConfigError(f"invalid pretrain settings {d}")
        return s

    def training(self) -> PretrainConfig:
        return PretrainConfig(self.epochs, self.batch_size, self.lr, self.momentum, self.weight_decay)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: Optional[BiasSpec]
    model: ModelSpec
    pretrain: PretrainSettings
    methods: tuple
    b_grid: tuple = (1, 2, 4, 8, 16, 32)
    batches_per_model: int = 5
    output_dir: str = "runs"
    workers: int = 1
    image_folder: Optional[str] = None
    contradicting: Optional[tuple] = None

    _KEYS = ("name", "dataset", "model", "pretrain", "methods", "grid", "b_grid", "batches_per_model",
             "output_dir", "workers")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "ExperimentConfig":
        _reject_unknown(d, cls._KEYS, "config")
        ds = d.get("dataset")
        if not isinstance(ds, dict):
            raise ConfigError("config: 'dataset' section is required")
        image_folder = contradicting = None
        bias = None
        if "image_folder" in ds:
            _reject_unknown(ds, ("image_folder", "contradicting"), "dataset")
            image_folder = str(Path(base_dir or ".") / ds["image_folder"])
            contradicting = tuple((None if l is None else int(l), str(g)) for l, g in ds.get("contradicting", []))
            if not contradicting:
                raise ConfigError("dataset: an image folder needs 'contradicting' (label, group) pairs")
        else:
            try:
                bias = BiasSpec.from_dict(ds)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"dataset: {e}") from None
        try:
            model = ModelSpec.from_dict(d["model"]) if d.get("model") else default_spec()
            model.shapes()
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"model: {e}") from None

        methods = [MethodSpec.from_dict(m) for m in d.get("methods", [])]
        methods += _expand_grid(d.get("grid"))
        if not methods:
            raise ConfigError("config: no methods (give 'methods' and/or 'grid')")
        if len(set(methods)) != len(methods):
            raise ConfigError("config: duplicate method entries")

        b_grid = tuple(int(b) for b in d.get("b_grid", (1, 2, 4, 8, 16, 32)))
        if not b_grid or any(not 1 <= b <= 32 for b in b_grid) or len(set(b_grid)) != len(b_grid):
            raise ConfigError(f"b_grid values must be distinct and within [1, 32], got {list(b_grid)}")
        batches = int(d.get("batches_per_model", 5))
        workers = int(d.get("workers", 1))
        if batches < 1 or workers < 1:
            raise ConfigError("batches_per_model and workers must be positive")
        try:
            pre = PretrainSettings.from_dict(d.get("pretrain", {}))
        except TypeError as e:
            raise ConfigError(f"pretrain: {e}") from None
        return cls(
            name=str(d.get("name", "experiment")),
            dataset=bias,
            model=model,
            pretrain=pre,
            methods=tuple(methods),
            b_grid=b_grid,
            batches_per_model=batches,
            output_dir=str(d.get("output_dir", "runs")),
            workers=workers,
            image_folder=image_folder,
            contradicting=contradicting,
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            with open(path) as f:
                d = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d, base_dir=path.parent)

    def to_dict(self) -> dict:
        if self.image_folder is not None:
            ds = {"image_folder": self.image_folder, "contradicting": [list(p) for p in self.contradicting]}
        else:
            ds = self.dataset.to_dict()
        pre = asdict(self.pretrain)
        pre["seeds"] = list(self.pretrain.seeds)
        return {
            "name": self.name,
            "dataset": ds,
            "model": self.model.to_dict(),
            "pretrain": pre,
            "methods": [m.to_dict() for m in self.methods],
            "b_grid": list(self.b_grid),
            "batches_per_model": self.batches_per_model,
            "output_dir": self.output_dir,
            "workers": self.workers,
        }

    def with_overrides(self, output_dir=None, seed=None, workers=None) -> "ExperimentConfig":
        cfg = self
        if output_dir is not None:
            cfg = replace(cfg, output_dir=str(output_dir))
        if seed is not None:
            cfg = replace(cfg, pretrain=replace(cfg.pretrain, seeds=(int(seed),)))
        if workers is not None:
            if workers < 1:
                raise ConfigError("workers must be positive")
            cfg = replace(cfg, workers=int(workers))
        return cfg

    @property
    def dataset_name(self) -> str:
        return self.dataset.structure.value if self.dataset is not None else Path(self.image_folder).name

    def model_hash(self, seed: int) -> str:
        """Identifies everything a pretrained checkpoint depends on."""
        d = self.to_dict()
        key = {"dataset": d["dataset"], "model": d["model"], "pretrain": {**d["pretrain"], "seeds": None}, "seed": seed}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def _expand_grid(grid) -> list:
    if grid is None:
        return []
    _reject_unknown(grid, ("norms", "lambdas", "epsilons", "lr", "momentum", "max_steps"), "grid")
    out = []
    for norm in grid.get("norms", ["Combined"]):
        for lam in grid.get("lambdas", [1.0]):
            for eps in grid.get("epsilons", [0]):
                d = {"method": "ChangePenalized", "norm": norm, "lambda": lam, "epsilon": eps}
                for k in ("lr", "momentum", "max_steps"):
                    if k in grid:
                        d[k] = grid[k]
                out.append(MethodSpec.from_dict(d))
    return out


# --------------------------------------------------------------------------
# data and checkpoints

_BUNDLES: dict = {}


def load_dataset(config: ExperimentConfig) -> DatasetBundle:
    key = json.dumps(config.to_dict()["dataset"], sort_keys=True)
    if key not in _BUNDLES:
        if config.image_folder is not None:
            bundle = load_image_folder(config.image_folder, config.model.input_shape, list(config.contradicting))
        else:
            bundle = generate(config.dataset)
        _BUNDLES[key] = bundle
    return _BUNDLES[key]


def checkpoint_path(config: ExperimentConfig, seed: int) -> Path:
    return Path(config.output_dir) / "checkpoints" / f"{config.dataset_name}_seed{seed}.ckpt"


def _ensure_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {path}: {e}") from None
    if not os.access(path, os.W_OK):
        raise OSError(f"output directory {path} is not writable")


def _pretrain_one(config: ExperimentConfig, seed: int) -> ParamSet:
    bundle = load_dataset(config)
    params = pretrain(config.model, bundle.train.x, bundle.train.y, seed, config.pretrain.training())
    path = checkpoint_path(config, seed)
    _ensure_dir(path.parent)
    checkpoint.save(params, config.model, path, {"config_hash": config.model_hash(seed), "seed": seed,
                                                  "dataset": config.dataset_name})
    # hand out exactly what a later load returns
    return checkpoint.load(path)[0]


def load_models(config: ExperimentConfig, train_missing: bool = True) -> dict:
    """Pretrained parameters per seed, (re)training stale or missing checkpoints."""
    models = {}
    for seed in config.pretrain.seeds:
        path = checkpoint_path(config, seed)
        params = None
        if path.is_file():
            p, spec, prov = checkpoint.load(path)
            if prov.get("config_hash") == config.model_hash(seed) and spec == config.model:
                params = p
        if params is None:
            if not train_missing:
                raise FileNotFoundError(f"no up-to-date checkpoint at {path}")
            params = _pretrain_one(config, seed)
        models[seed] = params
    return models


def evaluate(logits_fn, x: np.ndarray, y: np.ndarray, num_classes: int, chunk: int = 500):
    preds = [np.argmax(logits_fn(x[i:i + chunk]), axis=1) for i in range(0, len(x), chunk)]
    return metrics_report(np.concatenate(preds), y, num_classes)


def cmd_pretrain(config: ExperimentConfig) -> list[dict]:
    """Train every seed, write checkpoints and ``pretrain_report.csv``."""
    out = Path(config.output_dir)
    _ensure_dir(out)
    bundle = load_dataset(config)
    rows = []
    for seed in config.pretrain.seeds:
        params = _pretrain_one(config, seed)
        fn = lambda xb: forward(config.model, params, xb).data
        row = {"dataset": config.dataset_name, "seed": seed}
        test = evaluate(fn, bundle.test.x, bundle.test.y, config.model.num_classes)
        if bundle.holdout is not None:
            hold = evaluate(fn, bundle.holdout.x, bundle.holdout.y, config.model.num_classes)
            row.update(holdout_acc=hold.accuracy, holdout_bacc=hold.balanced_accuracy)
        else:
            row.update(holdout_acc=math.nan, holdout_bacc=math.nan)
        row.update(test_acc=test.accuracy, test_bacc=test.balanced_accuracy,
                   bias_gap=row["holdout_bacc"] - test.balanced_accuracy)
        rows.append(row)
    _write_csv(out / "pretrain_report.csv", list(rows[0]), rows, "deltatune-pretrain/1")
    return rows


# --------------------------------------------------------------------------
# tuning cells


@dataclass(frozen=True)
class Cell:
    method_index: int
    b: int
    seed: int
    batch_index: int


class _Context:
    """Per-process cache of the dataset, models and pre-tuning metrics."""

    def __init__(self, config: ExperimentConfig, models: Optional[dict] = None):
        self.config = config
        self.bundle = load_dataset(config)
        self.models = models if models is not None else load_models(config, train_missing=False)
        self._before = {}

    def before(self, seed: int):
        if seed not in self._before:
            params = self.models[seed]
            self._before[seed] = evaluate(lambda xb: forward(self.config.model, params, xb).data,
                                          self.bundle.test.x, self.bundle.test.y, self.config.model.num_classes)
        return self._before[seed]


def _change(method: MethodSpec, base: ParamSet, result) -> tuple[ParamSet, ParamSet]:
    """(reference parameters, parameter change) for the norm diagnostics."""
    if method.method is Method.CHANGE_PENALIZED:
        return base, result.params
    delta = ParamSet({k: result.params[k].data - base[k].data for k in base.names()})
    return base, delta


def run_cell(ctx: _Context, cell: Cell) -> dict:
    config = ctx.config
    method = config.methods[cell.method_index]
    row = {
        "dataset": config.dataset_name, "method": method.method.value, "lr": method.lr,
        "norm_kind": method.norm.value if method.norm else "", "lambda": method.lam if method.lam is not None else "",
        "epsilon": method.epsilon, "b": cell.b, "model_seed": cell.seed, "batch_index": cell.batch_index,
    }
    try:
        base = ctx.models[cell.seed]
        x, y, _ = select_contradicting(config.model, base, ctx.bundle.tune_pool, ctx.bundle.contradicting,
                                       cell.b, cell.batch_index, seed=cell.seed)
        tc = method.tune_config(cell.seed)
        result = tune(base, config.model, (x, y), tc)
        before = ctx.before(cell.seed)
        after = evaluate(tuned_logits_fn(result, config.model, base, tc), ctx.bundle.test.x, ctx.bundle.test.y,
                         config.model.num_classes)
        norms = norm_report(*_change(method, base, result))
        row.update(
            steps_taken=result.steps_taken, converged=int(result.converged),
            acc_before=before.accuracy, acc_after=after.accuracy,
            bacc_before=before.balanced_accuracy, bacc_after=after.balanced_accuracy,
            delta_l1=norms.delta_l1, delta_l2=norms.delta_l2, norm_diff=norms.norm_diff,
            sparsity_frac=norms.sparsity_frac, error="",
        )
        if not all(math.isfinite(row[k]) for k in _FLOAT_COLUMNS if k in row and row[k] != ""):
            raise FloatingPointError("non-finite metric")
    except Exception as e:  # recorded in the error column; the sweep continues
        for k in RESULT_COLUMNS:
            row.setdefault(k, "")
        row["error"] = f"{type(e).__name__}: {e}".replace("\n", " ")
    return row


def cmd_tune(config: ExperimentConfig, checkpoint_file, method_index: int, b: int, batch_index: int) -> dict:
    """One tuning run against a stored checkpoint; raises on failure."""
    params, spec, prov = checkpoint.load(checkpoint_file)
    if spec != config.model:
        raise ConfigError(f"checkpoint {checkpoint_file} was trained for a different model spec")
    if not 0 <= method_index < len(config.methods):
        raise ConfigError(f"method index {method_index} out of range (config has {len(config.methods)})")
    if not 1 <= b <= 32:
        raise ConfigError(f"b must lie in [1, 32], got {b}")
    seed = int(prov.get("seed", 0))
    ctx = _Context(config, models={seed: params})
    row = run_cell(ctx, Cell(method_index, b, seed, batch_index))
    if row["error"]:
        raise RuntimeError(row["error"])
    return row


# --------------------------------------------------------------------------
# sweep

_WORKER_CTX: Optional[_Context] = None


def _init_worker(config_dict: dict) -> None:
    global _WORKER_CTX
    cfg = ExperimentConfig.from_dict(config_dict)
    _WORKER_CTX = _Context(cfg)


def _run_in_worker(cell: Cell) -> dict:
    return run_cell(_WORKER_CTX, cell)


def sweep_cells(config: ExperimentConfig) -> list[Cell]:
    """All cells in canonical order: method, b, model seed, batch index."""
    return [
        Cell(m, b, seed, k)
        for m in range(len(config.methods))
        for b in config.b_grid
        for seed in config.pretrain.seeds
        for k in range(config.batches_per_model)
    ]


def run_sweep(config: ExperimentConfig, models: Optional[dict] = None) -> list[dict]:
    models = models if models is not None else load_models(config)
    cells = sweep_cells(config)
    if config.workers == 1 or len(cells) == 1:
        ctx = _Context(config, models)
        return [run_cell(ctx, c) for c in cells]
    # workers rebuild their context from the stored checkpoints
    with ProcessPoolExecutor(config.workers, initializer=_init_worker, initargs=(config.to_dict(),)) as pool:
        return list(pool.map(_run_in_worker, cells, chunksize=max(1, len(cells) // (8 * config.workers))))


def cmd_sweep(config: ExperimentConfig, filename: str = "results.csv") -> Path:
    """Run every cell and write the CSV plus a full-precision sidecar."""
    out = Path(config.output_dir)
    _ensure_dir(out)
    rows = run_sweep(config)
    path = out / filename
    _write_csv(path, RESULT_COLUMNS, rows, RESULTS_VERSION)
    write_sidecar(path.with_suffix(".f64"), rows)
    return path


# --------------------------------------------------------------------------
# serialization


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if math.isnan(v):
            return "nan"
        s = f"{float(v):.6g}"
        return "0" if s == "-0" else s
    return str(v)


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict], version: str) -> None:
    buf = io.StringIO()
    buf.write(f"# {version}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())


_SIDECAR_MAGIC = b"DTF64\x00"


def write_sidecar(path: Path, rows: Sequence[dict]) -> None:
    """Numeric columns at full precision: header JSON then a float64 LE matrix (NaN = empty)."""
    cols = [c for c in RESULT_COLUMNS if c in _FLOAT_COLUMNS or c in _INT_COLUMNS]
    mat = np.array([[float(r[c]) if r.get(c, "") != "" else np.nan for c in cols] for r in rows], dtype="<f8")
    head = json.dumps({"columns": cols, "rows": len(rows)}).encode()
    with open(path, "wb") as f:
        f.write(_SIDECAR_MAGIC + struct.pack("<I", len(head)) + head)
        f.write(mat.reshape(len(rows), len(cols)).tobytes())


def read_sidecar(path) -> tuple[list, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(len(_SIDECAR_MAGIC)) != _SIDECAR_MAGIC:
            raise ValueError(f"{path}: not a sidecar file")
        (n,) = struct.unpack("<I", f.read(4))
        head = json.loads(f.read(n))
        mat = np.frombuffer(f.read(), dtype="<f8")
    return head["columns"], mat.reshape(head["rows"], len(head["columns"]))


def read_results(path) -> list[dict]:
    """Parse a results CSV; malformed rows raise with their line number."""
    rows = []
    with open(path, encoding="utf-8", newline="") as f:
        lines = f.read().split("\n")
    header = None
    for lineno, line in enumerate(lines, start=1):
        if not line or line.startswith("#"):
            continue
        fields = next(csv.reader([line]))
        if header is None:
            if fields != RESULT_COLUMNS:
                raise ReportError(f"{path}:{lineno}: unexpected header {fields}")
            header = fields
            continue
        if len(fields) != len(header):
            raise ReportError(f"{path}:{lineno}: expected {len(header)} fields, got {len(fields)}")
        row = dict(zip(header, fields))
        if not row["error"]:
            try:
                for c in _INT_COLUMNS:
                    row[c] = int(row[c])
                for c in _FLOAT_COLUMNS:
                    row[c] = float(row[c]) if row[c] != "" else ""
            except ValueError as e:
                raise ReportError(f"{path}:{lineno}: {e}") from None
            if not all(math.isfinite(row[c]) for c in _FLOAT_COLUMNS if row[c] != ""):
                raise ReportError(f"{path}:{lineno}: non-finite value")
        rows.append(row)
    if header is None:
        raise ReportError(f"{path}: no header row")
    return rows


# --------------------------------------------------------------------------
# report


def _derived(row: dict) -> dict:
    r = dict(row)
    r["d_bacc"] = row["bacc_after"] - row["bacc_before"]
    r["d_acc"] = row["acc_after"] - row["acc_before"]
    r["lambda"] = row["lambda"] if row["lambda"] != "" else -1.0
    return r


def _series(row: dict, with_epsilon: bool = True) -> str:
    name = row["method"]
    if row["norm_kind"]:
        name += f"[{row['norm_kind']},lam={row['lambda']:g}]"
    name += f"/lr={row['lr']:g}"
    if with_epsilon:
        name += f"/eps={row['epsilon']}"
    return name


def cmd_report(paths: Sequence, output_dir) -> dict:
    """Aggregate result CSVs into ``aggregate.csv`` plus plot-data files.

    Returns the written paths keyed by role.  Rows carrying an error are
    skipped.
    """
    rows = []
    for p in paths:
        rows.extend(r for r in read_results(p) if not r["error"])
    if not rows:
        raise ReportError("no successful rows to aggregate")
    rows = [_derived(r) for r in rows]
    out = Path(output_dir)
    _ensure_dir(out)

    groups = aggregate(rows, _KEY_COLUMNS, REPORT_METRICS)
    cols = _KEY_COLUMNS + ["n"] + [f"{s}_{m}" for m in REPORT_METRICS for s in ("mean", "std")]
    agg_rows = []
    for g in groups:
        r = dict(zip(_KEY_COLUMNS, g.key))
        if r["lambda"] == -1.0:
            r["lambda"] = ""
        r["n"] = g.n
        for m in REPORT_METRICS:
            r[f"mean_{m}"] = g.mean[m]
            r[f"std_{m}"] = g.std[m]
        agg_rows.append(r)
    written = {"aggregate": out / "aggregate.csv"}
    _write_csv(written["aggregate"], cols, agg_rows, AGGREGATE_VERSION)

    # plot data: delta balanced accuracy and norm difference against b per
    # series, and the epsilon comparison with epsilon split out
    for role, metric, with_eps in (("dbacc_vs_b", "d_bacc", True), ("norm_diff_vs_b", "norm_diff", True),
                                   ("epsilon_vs_b", "d_bacc", False)):
        for r in rows:
            r["series"] = _series(r, with_eps)
        key = ["dataset", "series", "b"] if with_eps else ["dataset", "series", "epsilon", "b"]
        plot = []
        for g in aggregate(rows, key, [metric]):
            plot.append({**dict(zip(key, g.key)), "n": g.n, "mean": g.mean[metric], "std": g.std[metric]})
        written[role] = out / f"plot_{role}.csv"
        _write_csv(written[role], key + ["n", "mean", "std"], plot, f"deltatune-plot/1 {metric}")
    return written


def cmd_gen_data(config: ExperimentConfig) -> Path:
    if config.dataset is None:
        raise ConfigError("gen-data needs a generated dataset section, not an image folder")
    root = Path(config.output_dir) / "data"
    _ensure_dir(root)
    export_image_folder(generate(config.dataset), root)
    return root
