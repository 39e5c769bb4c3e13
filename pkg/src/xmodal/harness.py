"""Experiment configs, runners, and on-disk artifacts.

A run is fully described by its :class:`ExperimentConfig`; the same config
always produces byte-identical ``results.csv``, ``summary.json`` and
``history_<seed>.csv`` files.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .active import (
    AcquisitionConfig,
    ConsistencyALClassifier,
    run_al_loop,
    run_budget_schedule,
)
from .datagen import CER, DEC, SynthSpec, generate_synthetic_paired, load_csv_dataset
from .distill import CrossModalKDClassifier, CrossModalKDRegressor
from .metrics import classification_report, regression_report
from .numcore import RandomStream

MODES = ("kd", "al", "ablation", "label-efficiency")
_TAG_KD_TEST = 99

# (sim, unc, kd) on/off masks for the ablation grid; the task term is always on
ABLATION_MASKS = ((1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (1, 0, 1), (0, 1, 1), (1, 1, 1))


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class CsvPaths:
    student: str
    teacher: str
    labels: str


@dataclass(frozen=True)
class DataConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    csv: typing.Optional[CsvPaths] = None
    # Synthetic data is regenerated per run seed unless this is set
    fixed_seed: bool = False


@dataclass(frozen=True)
class KdSection:
    weights: typing.Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    beta: float = 10.0
    tau_temp: float = 1.0
    delta: float = 1.0
    injection_layer: int = 1
    uncertainty_form: str = "complement"
    monitor: str = "task"
    prototype_momentum: float = 0.9
    cer_bins: int = 3


@dataclass(frozen=True)
class AlSection:
    weights: typing.Tuple[float, ...] = (1.0, 1.0, 1.0)
    beta: float = 1.0
    eps: float = 1e-8
    rel_reduction: str = "mean"
    # Continue from the previous round's parameters instead of re-initialising
    warm_start: bool = True
    initial_fraction: float = 0.1
    oracle_noise: float = 0.0
    topfrac: float = 0.05


@dataclass(frozen=True)
class Acquisition:
    ratio: float = 0.1
    rounds: int = 5


@dataclass(frozen=True)
class Optimizer:
    lr: float = 1e-3
    lr_min: float = 1e-6
    epochs: int = 100
    teacher_epochs: int = 100
    batch: int = 32
    patience: int = 20
    validation_fraction: float = 0.2


@dataclass(frozen=True)
class ModelSection:
    hidden: int = 32
    embed_dim: int = 16


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "kd"
    task: str = DEC
    seeds: typing.Tuple[int, ...] = (0,)
    data: DataConfig = field(default_factory=DataConfig)
    kd: KdSection = field(default_factory=KdSection)
    al: AlSection = field(default_factory=AlSection)
    acquisition: Acquisition = field(default_factory=Acquisition)
    budgets: typing.Tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 1.0)
    optimizer: Optimizer = field(default_factory=Optimizer)
    model: ModelSection = field(default_factory=ModelSection)
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task not in (DEC, CER):
            raise ConfigError(f"task must be {DEC!r} or {CER!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(self.kd.weights) != 4 or len(self.al.weights) != 3:
            raise ConfigError("kd.weights needs 4 entries and al.weights needs 3")
        if any(w < 0 for w in self.kd.weights + self.al.weights):
            raise ConfigError("loss weights must be >= 0")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if list(self.budgets) != sorted(self.budgets) or not all(0 < b <= 1 for b in self.budgets):
            raise ConfigError("budgets must be increasing fractions in (0, 1]")
        if self.mode in ("al", "label-efficiency") and self.task != DEC:
            raise ConfigError("active learning runs are classification only")

    @classmethod
    def from_dict(cls, obj) -> "ExperimentConfig":
        return _build(cls, obj, "config")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(obj)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """Git-style blob SHA-1 of the canonical JSON encoding."""
        data = self.canonical_json().encode()
        return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, obj, path):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object, got {type(obj).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in obj.items():
        kwargs[name] = _coerce(hints[name], value, f"{path}.{name}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _coerce(hint, value, path):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        return None if value is None else _coerce(args[0], value, path)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        item = typing.get_args(hint)[0]
        return tuple(_coerce(item, v, f"{path}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


# ---------------------------------------------------------------- artifacts


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def mean_std(values) -> dict:
    """Mean and population standard deviation, ignoring NaN entries."""
    arr = np.asarray(values, dtype=np.float64)
    arr = arr[~np.isnan(arr)]
    if arr.size == 0:
        return {"mean": math.nan, "std": math.nan, "n": 0}
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


@dataclass
class RunArtifact:
    """Everything a run writes: per-row results, an aggregate summary and per-seed histories."""

    name: str
    config: ExperimentConfig
    columns: tuple
    rows: list
    summary: dict
    histories: dict = field(default_factory=dict)  # seed -> csv text

    def results_csv(self) -> str:
        return _csv(self.columns, self.rows)

    def summary_json(self) -> str:
        doc = {"name": self.name, "config": self.config.to_dict(),
               "config_hash": self.config.config_hash(), "summary": self.summary}
        return json.dumps(_json_safe(doc), sort_keys=True, indent=1) + "\n"

    def files(self) -> dict:
        out = {"results.csv": self.results_csv(), "summary.json": self.summary_json()}
        for seed in sorted(self.histories):
            out[f"history_{seed}.csv"] = self.histories[seed]
        return out

    def write(self, out_dir) -> list:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name, text in self.files().items():
            path = out_dir / name
            path.write_text(text)
            written.append(path)
        return written


# ---------------------------------------------------------------- data and models


def load_dataset(config: ExperimentConfig, seed: int, label_flip_rate=None):
    data = config.data
    if data.csv is not None:
        return load_csv_dataset(data.csv.student, data.csv.teacher, data.csv.labels, config.task)
    spec = replace(data.synth, task=config.task)
    if not data.fixed_seed:
        spec = replace(spec, seed=seed)
    if label_flip_rate is not None:
        spec = replace(spec, label_flip_rate=label_flip_rate)
    return generate_synthetic_paired(spec)


def kd_estimator(config: ExperimentConfig, seed: int, weights=None):
    kd, opt = config.kd, config.optimizer
    w = config.kd.weights if weights is None else weights
    cls = CrossModalKDClassifier if config.task == DEC else CrossModalKDRegressor
    return cls(lambda_sim=w[0], lambda_unc=w[1], lambda_kd=w[2], lambda_task=w[3],
               beta=kd.beta, tau_temp=kd.tau_temp, delta=kd.delta,
               injection_layer=kd.injection_layer, hidden=config.model.hidden,
               embed_dim=config.model.embed_dim, lr=opt.lr, lr_min=opt.lr_min, epochs=opt.epochs,
               teacher_epochs=opt.teacher_epochs, batch_size=opt.batch, patience=opt.patience,
               validation_fraction=opt.validation_fraction,
               prototype_momentum=kd.prototype_momentum, cer_bins=kd.cer_bins,
               monitor=kd.monitor, uncertainty_form=kd.uncertainty_form, random_state=seed)


def al_estimator(config: ExperimentConfig, seed: int, weights=None):
    al, opt = config.al, config.optimizer
    w = al.weights if weights is None else weights
    return ConsistencyALClassifier(lambda_sim=w[0], lambda_rel=w[1], lambda_task=w[2], beta=al.beta,
                                   eps=al.eps, hidden=config.model.hidden,
                                   embed_dim=config.model.embed_dim, lr=opt.lr, lr_min=opt.lr_min,
                                   epochs=opt.epochs, batch_size=opt.batch, patience=opt.patience,
                                   validation_fraction=opt.validation_fraction,
                                   rel_reduction=al.rel_reduction, warm_start=al.warm_start,
                                   random_state=seed)


def kd_split(n, test_fraction, seed):
    """Held-out test rows for KD runs: ``(train_idx, test_idx)``."""
    order = RandomStream(seed).sub_stream(_TAG_KD_TEST).permutation(n)
    n_test = int(math.floor(test_fraction * n))
    return order[n_test:], order[:n_test]


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))  # ordered by input


# ---------------------------------------------------------------- kd and ablation


def _kd_seed(args):
    config, seed, weights = args
    ds = load_dataset(config, seed)
    tr, te = kd_split(ds.n, config.test_fraction, seed)
    est = kd_estimator(config, seed, weights)
    est.fit(ds.x_s[tr], ds.labels_noisy[tr], X_teacher=ds.x_t[tr])
    pred = est.predict(ds.x_s[te])
    if config.task == DEC:
        rep = classification_report(np.asarray(pred, dtype=int), ds.labels_clean[te], ds.classes)
        metrics = {"accuracy": rep.accuracy, "macro_f1": rep.macro_f1}
    else:
        rep = regression_report(pred, ds.labels_clean[te])
        metrics = {"rmse": rep.rmse, "pcc": rep.pcc, "ccc": rep.ccc}
    metrics["epochs_run"] = len(est.history_)
    return metrics, est.loss_curve_csv()


def _metric_names(task):
    return ("accuracy", "macro_f1") if task == DEC else ("rmse", "pcc", "ccc")


def run_kd(config: ExperimentConfig, jobs: int = 1, weights=None, name="kd") -> RunArtifact:
    """Teacher pretraining then student distillation, once per seed."""
    outs = _map(_kd_seed, [(config, s, weights) for s in config.seeds], jobs)
    metrics = _metric_names(config.task)
    rows, histories = [], {}
    for seed, (m, curve) in zip(config.seeds, outs):
        rows.append({"seed": seed, **m})
        histories[seed] = curve
    summary = {k: mean_std([r[k] for r in rows]) for k in metrics}
    w = config.kd.weights if weights is None else weights
    summary["weights"] = list(w)
    return RunArtifact(name, config, ("seed",) + metrics + ("epochs_run",), rows, summary, histories)


def ablation_weights(base):
    """The seven loss-term subsets, task term always on, scaled by ``base``."""
    return [(m[0] * base[0], m[1] * base[1], m[2] * base[2], base[3]) for m in ABLATION_MASKS]


def run_ablation(config: ExperimentConfig, jobs: int = 1) -> RunArtifact:
    """One KD run per nonempty subset of {sim, unc, kd}; rows aggregate over seeds."""
    metrics = _metric_names(config.task)
    rows, summary = [], {}
    for mask, w in zip(ABLATION_MASKS, ablation_weights(config.kd.weights)):
        label = "".join(str(b) for b in mask)
        sub = replace(config, mode="kd", kd=replace(config.kd, weights=tuple(w)))
        art = run_kd(sub, jobs)
        row = {"terms": label, "lambda_sim": w[0], "lambda_unc": w[1], "lambda_kd": w[2],
               "lambda_task": w[3], "config_hash": sub.config_hash()}
        for k in metrics:
            row[f"{k}_mean"] = art.summary[k]["mean"]
            row[f"{k}_std"] = art.summary[k]["std"]
        rows.append(row)
        summary[label] = {"config": sub.to_dict(), "per_seed": art.rows,
                          **{k: art.summary[k] for k in metrics}}
    columns = ("terms", "lambda_sim", "lambda_unc", "lambda_kd", "lambda_task") + tuple(
        f"{k}_{s}" for k in metrics for s in ("mean", "std")) + ("config_hash",)
    return RunArtifact("ablation", config, columns, rows, summary)


# ---------------------------------------------------------------- active learning


AL_COLUMNS = ("seed", "round", "labeled_fraction", "test_accuracy", "mean_pool_entropy",
              "topfrac_entropy_mean")


def _al_seed(args):
    config, seed = args
    ds = load_dataset(config, seed)
    hist = run_al_loop(ds, al_estimator(config, seed), AcquisitionConfig(
        config.acquisition.ratio, config.acquisition.rounds), seed=seed,
        test_fraction=config.test_fraction, initial_fraction=config.al.initial_fraction,
        oracle_noise=config.al.oracle_noise, topfrac=config.al.topfrac)
    return hist.rows, hist.to_csv()


def run_al(config: ExperimentConfig, jobs: int = 1) -> RunArtifact:
    """Entropy-driven acquisition rounds per seed, tracking accuracy and pool entropy."""
    outs = _map(_al_seed, [(config, s) for s in config.seeds], jobs)
    rows, histories, ratios, final_acc = [], {}, [], []
    for seed, (hist_rows, text) in zip(config.seeds, outs):
        rows.extend({"seed": seed, **r} for r in hist_rows)
        histories[seed] = text
        series = [r["mean_pool_entropy"] for r in hist_rows if not math.isnan(r["mean_pool_entropy"])]
        ratios.append(series[-1] / series[0] if len(series) > 1 and series[0] > 0 else math.nan)
        final_acc.append(hist_rows[-1]["test_accuracy"])
    summary = {"final_test_accuracy": mean_std(final_acc),
               "entropy_ratio_last_over_first": mean_std(ratios)}
    return RunArtifact("al", config, AL_COLUMNS, rows, summary, histories)


LE_COLUMNS = ("seed", "method", "budget", "test_accuracy")


def _label_efficiency_seed(args):
    config, seed = args
    ds = load_dataset(config, seed)
    budgets = tuple(config.budgets)
    model = al_estimator(config, seed)
    plain = al_estimator(config, seed, weights=(0.0, 0.0, config.al.weights[2]))
    kw = {"test_fraction": config.test_fraction}
    rows = []
    for method, strategy in (("uncertainty", "entropy"), ("random", "random")):
        hist = run_budget_schedule(ds, model, budgets, strategy, seed, **kw)
        rows += [{"seed": seed, "method": method, "budget": b, "test_accuracy": r["test_accuracy"]}
                 for b, r in zip(budgets, hist.rows)]
        if method == "uncertainty":
            text = hist.to_csv()
    # No-AL: a task-only model trained on every pool label, and on the random
    # strategy's 50 % subset (random picks never depend on the model, so
    # replaying the schedule up to 0.5 reproduces that subset exactly)
    full = run_budget_schedule(ds, plain, (1.0,), "random", seed, use_aux=False, **kw)
    rows.append({"seed": seed, "method": "no_al", "budget": 1.0,
                 "test_accuracy": full.rows[0]["test_accuracy"]})
    upto = tuple(b for b in budgets if b < 0.5) + (0.5,)
    half = run_budget_schedule(ds, plain, upto, "random", seed, use_aux=False, **kw)
    rows.append({"seed": seed, "method": "no_al_random_subset", "budget": 0.5,
                 "test_accuracy": half.rows[-1]["test_accuracy"]})
    return rows, text


def run_label_efficiency(config: ExperimentConfig, jobs: int = 1) -> RunArtifact:
    """Accuracy against labeled-budget fraction for uncertainty, random and No-AL."""
    outs = _map(_label_efficiency_seed, [(config, s) for s in config.seeds], jobs)
    rows, histories = [], {}
    for seed, (seed_rows, text) in zip(config.seeds, outs):
        rows.extend(seed_rows)
        histories[seed] = text
    summary = {}
    for r in rows:
        summary.setdefault(r["method"], {}).setdefault(repr(float(r["budget"])), []).append(r["test_accuracy"])
    summary = {m: {b: mean_std(v) for b, v in sorted(per.items())} for m, per in sorted(summary.items())}
    return RunArtifact("label-efficiency", config, LE_COLUMNS, rows, summary, histories)


RUNNERS = {"kd": run_kd, "al": run_al, "ablation": run_ablation,
           "label-efficiency": run_label_efficiency}


def run(config: ExperimentConfig, jobs: int = 1) -> RunArtifact:
    return RUNNERS[config.mode](config, jobs)
