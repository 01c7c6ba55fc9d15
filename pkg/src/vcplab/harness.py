"""Experiment runner: train a classifier and track margin / counterfactual metrics.

A run is fully described by an :class:`ExperimentConfig` (JSON-serializable).
At epoch 0, every ``checkpoint_every`` epochs and at the last epoch the model
is evaluated in inference mode on the training split.
"""
from __future__ import annotations

import copy
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .dataset import (
    DataError,
    Dataset,
    ExpansionSpec,
    expand_polynomial,
    fit_standardizer,
    impute_means,
    load_csv,
    make_synthetic_gaussians,
    split,
)
from .model import (
    INIT_SCHEME,
    Activation,
    DivergenceError,
    LinearModel,
    MlpModel,
    TrainingConfig,
    accuracy,
    make_optimizer,
    save_checkpoint,
    train_epoch,
)
from .vcp import REGIONS, aggregate, rescale_epsilon

CHECKPOINT_COLUMNS = ("epoch", "train_acc", "test_acc", "mean_margin", "mean_vcp", "vcp_stderr", "excluded_margins")
# Perturbation radii of the full-scale reference runs.
EPSILON_PRESETS = {"water-logreg": 35.0, "water-mlp": 1.5, "air-mlp": 0.373}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


class ExperimentDivergence(DivergenceError):
    """Training diverged; ``checkpoints`` holds everything recorded before."""

    def __init__(self, message, checkpoints, epoch=None, batch=None):
        super().__init__(message, epoch, batch)
        self.checkpoints = checkpoints


def _strict(section: str, raw, allowed) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected an object, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        prefix = f"{section}." if section else ""
        raise ConfigError(f"unknown field {prefix}{unknown[0]}")
    return raw


@dataclass
class DatasetSource:
    source: str = "synthetic"
    # synthetic
    m: int = 200
    n: int = 2
    separation: float = 2.0
    label_noise: float = 0.0
    seed: int = 0
    # csv
    path: Optional[str] = None
    label_column: Optional[str] = None
    missing_policy: str = "mean"

    def to_dict(self) -> dict:
        if self.source == "csv":
            return {"source": "csv", "path": self.path, "label_column": self.label_column,
                    "missing_policy": self.missing_policy}
        return {"source": "synthetic", "m": self.m, "n": self.n, "separation": self.separation,
                "label_noise": self.label_noise, "seed": self.seed}


@dataclass
class ModelSpec:
    kind: str = "linear"
    layer_widths: list = field(default_factory=list)
    activation: str = "tanh"
    dropout_rate: float = 0.0

    def to_dict(self) -> dict:
        if self.kind == "linear":
            return {"kind": "linear"}
        return {"kind": "mlp", "layer_widths": list(self.layer_widths), "activation": self.activation,
                "dropout_rate": self.dropout_rate}


@dataclass
class EpsilonPolicy:
    policy: str = "fixed"
    value: Optional[float] = None
    base: Optional[float] = None

    def to_dict(self) -> dict:
        if self.policy == "fixed":
            return {"policy": "fixed", "value": self.value}
        return {"policy": "rescale", "base": self.base}

    def resolve(self, n: int, n_prime: int) -> float:
        if self.policy == "fixed":
            return float(self.value)
        return rescale_epsilon(self.base, n, n_prime)


@dataclass
class VcpSettings:
    region: str = "ball"
    samples: int = 1000


@dataclass
class ExperimentConfig:
    dataset: DatasetSource = field(default_factory=DatasetSource)
    test_fraction: float = 0.2
    standardize: bool = True
    expansion: Optional[dict] = None
    model: ModelSpec = field(default_factory=ModelSpec)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    epsilon: EpsilonPolicy = field(default_factory=lambda: EpsilonPolicy("fixed", 1.0))
    vcp: VcpSettings = field(default_factory=VcpSettings)
    checkpoint_every: int = 100
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        d = self.dataset
        if d.source not in ("synthetic", "csv"):
            raise ConfigError(f"dataset.source must be 'synthetic' or 'csv', got {d.source!r}")
        if d.source == "csv" and (not d.path or not d.label_column):
            raise ConfigError("dataset.path and dataset.label_column are required for csv sources")
        if d.missing_policy not in ("drop", "mean"):
            raise ConfigError(f"dataset.missing_policy must be 'drop' or 'mean', got {d.missing_policy!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if self.expansion is not None:
            if int(self.expansion.get("degree", 0)) < 1:
                raise ConfigError("expansion.degree must be a positive integer")
        m = self.model
        if m.kind not in ("linear", "mlp"):
            raise ConfigError(f"model.kind must be 'linear' or 'mlp', got {m.kind!r}")
        if m.kind == "mlp":
            if not m.layer_widths or any(int(w) < 1 for w in m.layer_widths):
                raise ConfigError("model.layer_widths must be a non-empty list of positive integers")
            if m.activation not in {a.value for a in Activation}:
                raise ConfigError(f"model.activation must be 'tanh' or 'relu', got {m.activation!r}")
            if not 0.0 <= m.dropout_rate < 1.0:
                raise ConfigError(f"model.dropout_rate must lie in [0, 1), got {m.dropout_rate}")
        e = self.epsilon
        if e.policy == "fixed":
            if e.value is None or not e.value > 0:
                raise ConfigError("epsilon.value must be a positive number for policy 'fixed'")
        elif e.policy == "rescale":
            if e.base is None or not e.base > 0:
                raise ConfigError("epsilon.base must be a positive number for policy 'rescale'")
        else:
            raise ConfigError(f"epsilon.policy must be 'fixed' or 'rescale', got {e.policy!r}")
        if self.vcp.region not in REGIONS:
            raise ConfigError(f"vcp.region must be one of {REGIONS}, got {self.vcp.region!r}")
        if self.vcp.samples < 1:
            raise ConfigError("vcp.samples must be >= 1")
        if not 1 <= self.checkpoint_every <= self.training.epochs:
            raise ConfigError(
                f"checkpoint_every must lie in [1, training.epochs={self.training.epochs}], got {self.checkpoint_every}"
            )

    def to_dict(self) -> dict:
        t = self.training
        return {
            "dataset": self.dataset.to_dict(),
            "test_fraction": self.test_fraction,
            "standardize": self.standardize,
            "expansion": None if self.expansion is None else {
                "degree": int(self.expansion["degree"]),
                "include_bias": bool(self.expansion.get("include_bias", True)),
            },
            "model": self.model.to_dict(),
            "training": {
                "optimizer": t.optimizer,
                "learning_rate": t.learning_rate,
                "batch_size": t.batch_size,
                "epochs": t.epochs,
                "adam_betas": list(t.adam_betas),
                "adam_epsilon": t.adam_epsilon,
            },
            "epsilon": self.epsilon.to_dict(),
            "vcp": asdict(self.vcp),
            "checkpoint_every": self.checkpoint_every,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw) -> "ExperimentConfig":
        raw = _strict("", raw, {
            "dataset", "test_fraction", "standardize", "expansion", "model", "training",
            "epsilon", "vcp", "checkpoint_every", "seed",
        })
        kw = {}
        try:
            if "dataset" in raw:
                kw["dataset"] = DatasetSource(**_strict("dataset", raw["dataset"], {
                    "source", "m", "n", "separation", "label_noise", "seed", "path", "label_column",
                    "missing_policy"}))
            if "model" in raw:
                kw["model"] = ModelSpec(**_strict("model", raw["model"], {
                    "kind", "layer_widths", "activation", "dropout_rate"}))
            if "training" in raw:
                kw["training"] = TrainingConfig(**_strict("training", raw["training"], {
                    "optimizer", "learning_rate", "batch_size", "epochs", "adam_betas", "adam_epsilon"}))
            if "epsilon" in raw:
                kw["epsilon"] = EpsilonPolicy(**_strict("epsilon", raw["epsilon"], {"policy", "value", "base"}))
            if "vcp" in raw:
                kw["vcp"] = VcpSettings(**_strict("vcp", raw["vcp"], {"region", "samples"}))
            if raw.get("expansion") is not None:
                kw["expansion"] = dict(_strict("expansion", raw["expansion"], {"degree", "include_bias"}))
            for key in ("test_fraction", "standardize", "checkpoint_every", "seed"):
                if key in raw:
                    kw[key] = raw[key]
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"training: {exc}") from None
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        """Read a config file; a ``run.json`` written by :func:`emit_results` also works."""
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if isinstance(raw, dict) and "config" in raw and "checkpoints_file" in raw:
            raw = raw["config"]
        return cls.from_dict(raw)


@dataclass
class PreparedData:
    train: Dataset
    test: Dataset
    input_dim: int
    feature_dim: int


def prepare_data(config: ExperimentConfig) -> PreparedData:
    """Load, split, impute, standardize (train statistics) and expand."""
    src = config.dataset
    if src.source == "csv":
        policy = "drop" if src.missing_policy == "drop" else "keep"
        full = load_csv(src.path, src.label_column, policy)
    else:
        full = make_synthetic_gaussians(src.m, src.n, src.separation, src.seed, src.label_noise)
    train, test = split(full, config.test_fraction, config.seed)
    if np.isnan(train.features).any() or np.isnan(test.features).any():
        train, test = impute_means(train, test)
    if config.standardize:
        stats = fit_standardizer(train)
        train, test = stats.apply(train), stats.apply(test)
    n = train.n
    if config.expansion is not None:
        spec = ExpansionSpec(int(config.expansion["degree"]), n, bool(config.expansion.get("include_bias", True)))
        names = tuple(spec.names(list(train.feature_names)))
        train = train.with_features(expand_polynomial(train.features, spec), names)
        test = test.with_features(expand_polynomial(test.features, spec), names)
    return PreparedData(train, test, n, train.n)


def _seed(config_seed: int, tag: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(config_seed), tag])


def build_model(config: ExperimentConfig, feature_dim: int):
    init_rng = np.random.default_rng(_seed(config.seed, 1))
    spec = config.model
    if spec.kind == "linear":
        fit_bias = not (config.expansion is not None and config.expansion.get("include_bias", True))
        return LinearModel.initialize(feature_dim, init_rng, fit_bias=fit_bias)
    return MlpModel.initialize(feature_dim, spec.layer_widths, init_rng, Activation(spec.activation), spec.dropout_rate)


@dataclass
class CheckpointMetrics:
    epoch: int
    train_accuracy: float
    test_accuracy: float
    mean_margin: float
    mean_vcp: float
    vcp_stderr: float
    excluded_margin_count: int

    def row(self) -> list:
        return [self.epoch, repr(self.train_accuracy), repr(self.test_accuracy), repr(self.mean_margin),
                repr(self.mean_vcp), repr(self.vcp_stderr), self.excluded_margin_count]


@dataclass
class RunResult:
    config: ExperimentConfig
    checkpoints: list
    epsilon: float
    input_dim: int
    feature_dim: int
    wall_time: float = 0.0
    code_version: str = __version__

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(c, name) for c in self.checkpoints], dtype=float)


def checkpoint_epochs(epochs: int, every: int) -> list:
    grid = list(range(0, epochs + 1, every))
    if grid[-1] != epochs:
        grid.append(epochs)
    return grid


def evaluate_checkpoint(model, data: PreparedData, epoch: int, epsilon: float, config: ExperimentConfig,
                        workers: int = 1) -> CheckpointMetrics:
    agg = aggregate(model, data.train, epsilon, config.vcp.region, config.vcp.samples, config.seed, workers=workers)
    return CheckpointMetrics(
        epoch=epoch,
        train_accuracy=accuracy(model, data.train),
        test_accuracy=accuracy(model, data.test),
        mean_margin=agg.mean_margin,
        mean_vcp=agg.mean_p,
        vcp_stderr=agg.stderr,
        excluded_margin_count=agg.excluded_margin_count,
    )


def run_experiment(config: ExperimentConfig, out_dir=None, workers: int = 1, save_models: bool = False,
                   progress=None) -> RunResult:
    """Train per ``config`` and record :class:`CheckpointMetrics` along the way.

    With ``save_models`` and an ``out_dir`` every checkpoint's parameters are
    written to ``epoch_<t>.ckpt``.
    """
    started = time.perf_counter()
    data = prepare_data(config)
    epsilon = config.epsilon.resolve(data.input_dim, data.feature_dim)
    model = build_model(config, data.feature_dim)
    grid = set(checkpoint_epochs(config.training.epochs, config.checkpoint_every))
    train_rng = np.random.default_rng(_seed(config.seed, 2))
    optimizer = make_optimizer(config.training)
    ckpt_dir = Path(out_dir) if (out_dir is not None and save_models) else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    checkpoints = []

    def record(epoch):
        metrics = evaluate_checkpoint(model, data, epoch, epsilon, config, workers)
        checkpoints.append(metrics)
        if ckpt_dir is not None:
            save_checkpoint(model, ckpt_dir / f"epoch_{epoch}.ckpt", epoch=epoch, seed=config.seed)
        if progress is not None:
            progress(metrics)

    record(0)
    for epoch in range(1, config.training.epochs + 1):
        try:
            model, _ = train_epoch(model, data.train, config.training, train_rng, optimizer, epoch=epoch)
        except DivergenceError as exc:
            raise ExperimentDivergence(str(exc), checkpoints, exc.epoch, exc.batch) from exc
        if epoch in grid:
            record(epoch)
    return RunResult(config, checkpoints, epsilon, data.input_dim, data.feature_dim,
                     wall_time=time.perf_counter() - started)


def run_pair_regularization(config: ExperimentConfig, dropout_rate: Optional[float] = None, **kwargs):
    """Two runs identical except for dropout: 0 and ``dropout_rate`` (default 0.5 or the config's)."""
    if config.model.kind != "mlp":
        raise ConfigError("model.kind must be 'mlp' for a regularization pair")
    if dropout_rate is None:
        dropout_rate = config.model.dropout_rate or 0.5
    plain_cfg = copy.deepcopy(config)
    plain_cfg.model.dropout_rate = 0.0
    reg_cfg = copy.deepcopy(config)
    reg_cfg.model.dropout_rate = float(dropout_rate)
    reg_cfg.validate()
    return run_experiment(plain_cfg, **kwargs), run_experiment(reg_cfg, **kwargs)


def write_checkpoints_csv(checkpoints, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CHECKPOINT_COLUMNS)
        for c in checkpoints:
            w.writerow(c.row())
    return path


def read_checkpoints_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return [
            CheckpointMetrics(
                int(r["epoch"]), float(r["train_acc"]), float(r["test_acc"]), float(r["mean_margin"]),
                float(r["mean_vcp"]), float(r["vcp_stderr"]), int(r["excluded_margins"]),
            )
            for r in csv.DictReader(fh)
        ]


def run_metadata(result: RunResult) -> dict:
    return {
        "config": result.config.to_dict(),
        "resolved": {
            "epsilon": result.epsilon,
            "input_dim": result.input_dim,
            "feature_dim": result.feature_dim,
            "checkpoint_epochs": [c.epoch for c in result.checkpoints],
        },
        "defaults": {
            "loss": "binary cross-entropy on sigmoid(score)",
            "init": INIT_SCHEME,
            "dropout": "inverted, hidden layers, training only",
            "margin_method": "exact-linear" if result.config.model.kind == "linear" else "gradient-first-order",
            "vcp_seed_derivation": "SeedSequence([seed, point_index])",
        },
        "checkpoints_file": "checkpoints.csv",
        "code_version": result.code_version,
        "wall_time_s": result.wall_time,
    }


def _svg_polyline(xs, ys, x0, y0, w, h, color):
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    ok = np.isfinite(ys)
    if ok.sum() < 1:
        return ""
    xs, ys = xs[ok], ys[ok]
    xspan = (xs.max() - xs.min()) or 1.0
    lo, hi = ys.min(), ys.max()
    yspan = (hi - lo) or 1.0
    pts = " ".join(f"{x0 + w * (x - xs.min()) / xspan:.2f},{y0 + h - h * (y - lo) / yspan:.2f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>'


def write_svg(result: RunResult, path) -> Path:
    """Mean probability and mean margin against epoch, each scaled to its own range."""
    W, H, pad = 640, 360, 40
    epochs = result.column("epoch")
    series = [("mean_vcp", "#c0392b"), ("mean_margin", "#2471a3"), ("train_accuracy", "#27ae60")]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
        f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle" font-size="12">epoch</text>',
    ]
    for k, (name, color) in enumerate(series):
        parts.append(_svg_polyline(epochs, result.column(name), pad, pad, W - 2 * pad, H - 2 * pad, color))
        parts.append(f'<text x="{pad + 10}" y="{pad + 14 * (k + 1)}" fill="{color}" font-size="12">{name} (scaled)</text>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(p for p in parts if p) + "\n")
    return path


def emit_results(result: RunResult, out_dir, svg: bool = True) -> dict:
    """Write ``checkpoints.csv``, ``run.json`` and optionally ``curves.svg`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "checkpoints": write_checkpoints_csv(result.checkpoints, out / "checkpoints.csv"),
        "run": out / "run.json",
    }
    files["run"].write_text(json.dumps(run_metadata(result), indent=2, sort_keys=True) + "\n")
    if svg and result.checkpoints:
        files["svg"] = write_svg(result, out / "curves.svg")
    return files


def trend_summary(result: RunResult) -> dict:
    """Spearman rank correlations of the tracked quantities against training accuracy."""
    from scipy.stats import spearmanr

    acc = result.column("train_accuracy")
    out = {}
    for name in ("mean_vcp", "mean_margin"):
        col = result.column(name)
        ok = np.isfinite(col)
        rho = spearmanr(acc[ok], col[ok]).statistic if ok.sum() > 2 else math.nan
        out[f"spearman_acc_{name}"] = float(rho)
    return out


def preset(name: str, data_path: str, label_column: Optional[str] = None) -> ExperimentConfig:
    """Full-scale reference configurations (6,000 epochs on the original CSV data)."""
    common = dict(test_fraction=0.2, standardize=True, checkpoint_every=100, seed=0)
    water = DatasetSource("csv", path=data_path, label_column=label_column or "Potability")
    if name == "water-logreg":
        return ExperimentConfig(
            dataset=water, expansion={"degree": 6, "include_bias": True}, model=ModelSpec("linear"),
            training=TrainingConfig("sgd", 1e-3, 128, 6000),
            epsilon=EpsilonPolicy("fixed", EPSILON_PRESETS["water-logreg"]), **common)
    if name == "water-mlp":
        return ExperimentConfig(
            dataset=water, model=ModelSpec("mlp", [100, 30]), training=TrainingConfig("sgd", 1e-3, 128, 6000),
            epsilon=EpsilonPolicy("fixed", EPSILON_PRESETS["water-mlp"]), **common)
    if name == "water-mlp5":
        return ExperimentConfig(
            dataset=water, model=ModelSpec("mlp", [100, 50, 25, 15, 5], dropout_rate=0.5),
            training=TrainingConfig("adam", 1e-3, 128, 6000),
            epsilon=EpsilonPolicy("fixed", EPSILON_PRESETS["water-mlp"]), **common)
    if name == "air-mlp5":
        if not label_column:
            raise ConfigError("preset air-mlp5 needs --label-column")
        return ExperimentConfig(
            dataset=DatasetSource("csv", path=data_path, label_column=label_column),
            model=ModelSpec("mlp", [100, 50, 25, 15, 5], dropout_rate=0.5),
            training=TrainingConfig("adam", 1e-5, 128, 6000),
            epsilon=EpsilonPolicy("fixed", EPSILON_PRESETS["air-mlp"]), **common)
    raise ConfigError(f"unknown preset {name!r}; choose from water-logreg, water-mlp, water-mlp5, air-mlp5")


PRESETS = ("water-logreg", "water-mlp", "water-mlp5", "air-mlp5")
