"""Config-driven experiment runner.

A run is fully determined by its config and seed: dataset bytes, parameter
initialization, batch order, and all optimizer arithmetic derive from them,
so two runs with the same config produce byte-identical metric and
diagnostics files.  Wall times are recorded in the summary only, never in
the deterministic CSVs.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (
    BatchIterator,
    Dataset,
    load_csv,
    load_idx,
    make_synthetic_blobs,
    split,
    standardize,
)
from .diagnostics import DiagnosticsRecorder, softmax_grad_ratio_probe
from .nn import MLP, softmax_cross_entropy
from .optim import SGD, Adam, LrSchedule, NDAdam, ParamGroup
from .tensor import Tape, Tensor

__all__ = [
    "ConfigError",
    "NanLossError",
    "DatasetSpec",
    "ModelSpec",
    "OptimizerSpec",
    "ScheduleSpec",
    "DiagnosticsSpec",
    "ExperimentConfig",
    "EpochMetrics",
    "RunLog",
    "run",
    "compare",
    "probe_softmax",
    "distinct_logits",
    "OUTPUT_DIR_ENV",
]

OUTPUT_DIR_ENV = "NDADAM_OUTPUT_DIR"

DEFAULT_ETAS = (1e-4, 1e-2, 1.0, 1e2, 1e3)


class ConfigError(ValueError):
    """Invalid experiment configuration; raised before any compute."""


class NanLossError(RuntimeError):
    """Training loss became non-finite; the run aborts at that step."""


def _from_dict(cls, data: dict, context: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{context}: expected an object, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}; allowed keys are {sorted(allowed)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{context}: {exc}") from None


@dataclass
class DatasetSpec:
    kind: str = "blobs"
    num_classes: int = 10
    samples_per_class: int = 100
    feature_dim: int = 32
    spread: float = 1.0
    images_path: str | None = None
    labels_path: str | None = None
    csv_path: str | None = None
    test_fraction: float = 0.2
    standardize: bool = False

    def validate(self):
        if self.kind not in ("blobs", "idx", "csv"):
            raise ConfigError(f"dataset.kind must be blobs, idx, or csv, got {self.kind!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"dataset.test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.kind == "blobs":
            if min(self.num_classes, self.samples_per_class, self.feature_dim) < 1:
                raise ConfigError("dataset: blobs counts must be positive")
            if self.spread <= 0:
                raise ConfigError(f"dataset.spread must be positive, got {self.spread}")
        if self.kind == "idx" and not (self.images_path and self.labels_path):
            raise ConfigError("dataset: idx needs images_path and labels_path")
        if self.kind == "csv" and not self.csv_path:
            raise ConfigError("dataset: csv needs csv_path")


@dataclass
class ModelSpec:
    hidden_widths: list[int] = field(default_factory=lambda: [128, 128, 128])
    activation: str = "relu"
    use_batch_norm: bool = True
    use_gamma: bool = True
    head: str = "softmax"
    head_gamma: float = 1.0
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def validate(self):
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise ConfigError(f"model.hidden_widths must be positive, got {self.hidden_widths}")
        if self.head not in ("softmax", "bn_softmax"):
            raise ConfigError(f"model.head must be softmax or bn_softmax, got {self.head!r}")
        if self.head == "bn_softmax" and self.head_gamma <= 0:
            raise ConfigError(f"model.head_gamma must be positive, got {self.head_gamma}")


_OPTIMIZER_KEYS = {
    "sgd": {"alpha0", "momentum", "weight_decay"},
    "adam": {"alpha0", "beta1", "beta2", "eps"},
    "nd_adam": {"alpha0_vector", "alpha0_scalar", "beta1", "beta2", "eps"},
}


@dataclass
class OptimizerSpec:
    kind: str = "nd_adam"
    alpha0: float | None = None
    alpha0_vector: float | None = None
    alpha0_scalar: float | None = None
    momentum: float = 0.9
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self, provided_keys: set[str]):
        if self.kind not in _OPTIMIZER_KEYS:
            raise ConfigError(f"optimizer.kind must be one of {sorted(_OPTIMIZER_KEYS)}, got {self.kind!r}")
        stray = provided_keys - _OPTIMIZER_KEYS[self.kind] - {"kind"}
        if stray:
            raise ConfigError(
                f"optimizer: keys {sorted(stray)} do not apply to kind {self.kind!r}"
            )
        if self.kind in ("sgd", "adam"):
            if self.alpha0 is None or self.alpha0 <= 0:
                raise ConfigError(f"optimizer.alpha0 must be positive, got {self.alpha0}")
        if self.kind == "nd_adam":
            if self.alpha0_vector is None or self.alpha0_vector <= 0:
                raise ConfigError(f"optimizer.alpha0_vector must be positive, got {self.alpha0_vector}")
            if self.alpha0_scalar is None or self.alpha0_scalar <= 0:
                raise ConfigError(f"optimizer.alpha0_scalar must be positive, got {self.alpha0_scalar}")
        if self.kind == "sgd" and not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"optimizer.momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"optimizer.weight_decay must be nonnegative, got {self.weight_decay}")


@dataclass
class ScheduleSpec:
    kind: str = "cosine"
    epochs: int = 10
    batch_size: int = 64

    def validate(self):
        if self.kind not in ("constant", "cosine"):
            raise ConfigError(f"schedule.kind must be constant or cosine, got {self.kind!r}")
        if self.epochs < 1:
            raise ConfigError(f"schedule.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"schedule.batch_size must be >= 2, got {self.batch_size}")


@dataclass
class DiagnosticsSpec:
    layers: list[str] | str = "all"
    stride: int = 10
    per_unit: bool = False

    def validate(self):
        if self.stride < 1:
            raise ConfigError(f"diagnostics.stride must be >= 1, got {self.stride}")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    diagnostics: DiagnosticsSpec = field(default_factory=DiagnosticsSpec)
    seed: int = 0
    output_dir: str = "runs/experiment"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config: expected an object, got {type(data).__name__}")
        allowed = {f.name for f in fields(cls)}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"config: unknown keys {sorted(unknown)}; allowed keys are {sorted(allowed)}")
        cfg = cls(
            dataset=_from_dict(DatasetSpec, data.get("dataset", {}), "dataset"),
            model=_from_dict(ModelSpec, data.get("model", {}), "model"),
            optimizer=_from_dict(OptimizerSpec, data.get("optimizer", {}), "optimizer"),
            schedule=_from_dict(ScheduleSpec, data.get("schedule", {}), "schedule"),
            diagnostics=_from_dict(DiagnosticsSpec, data.get("diagnostics", {}), "diagnostics"),
            seed=data.get("seed", 0),
            output_dir=data.get("output_dir", "runs/experiment"),
        )
        cfg.validate(provided_optimizer_keys=set(data.get("optimizer", {})))
        return cfg

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def validate(self, provided_optimizer_keys: set[str] | None = None):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        self.dataset.validate()
        self.model.validate()
        self.optimizer.validate(
            provided_optimizer_keys
            if provided_optimizer_keys is not None
            else _OPTIMIZER_KEYS[self.optimizer.kind] | {"kind"}
        )
        self.schedule.validate()
        self.diagnostics.validate()

    def to_dict(self) -> dict:
        view = asdict(self)
        # emit only the optimizer keys that apply to its kind, so an echoed
        # config passes the strict unknown-key validation when re-run
        opt = view["optimizer"]
        view["optimizer"] = {"kind": opt["kind"]} | {
            k: opt[k] for k in sorted(_OPTIMIZER_KEYS[opt["kind"]])
        }
        return view


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float
    wall_time: float


@dataclass
class RunLog:
    config: ExperimentConfig
    epochs: list[EpochMetrics]
    output_dir: Path
    metrics_path: Path
    diagnostics_path: Path
    summary_path: Path

    @property
    def final(self) -> EpochMetrics:
        return self.epochs[-1]


def _build_dataset(spec: DatasetSpec, seed: int) -> tuple[Dataset, Dataset]:
    if spec.kind == "blobs":
        full = make_synthetic_blobs(
            spec.num_classes, spec.samples_per_class, spec.feature_dim,
            spread=spec.spread, seed=seed,
        )
    elif spec.kind == "idx":
        full = load_idx(spec.images_path, spec.labels_path)
    else:
        full = load_csv(spec.csv_path)
    train, test = split(full, spec.test_fraction, seed=(seed, 1))
    if spec.standardize:
        train, test = standardize(train, test)
    return train, test


def _build_model(spec: ModelSpec, feature_dim: int, num_classes: int, seed: int) -> MLP:
    return MLP(
        feature_dim,
        spec.hidden_widths,
        num_classes,
        activation=spec.activation,
        use_batch_norm=spec.use_batch_norm,
        use_gamma=spec.use_gamma,
        head=spec.head,
        head_gamma=spec.head_gamma,
        bn_momentum=spec.bn_momentum,
        bn_eps=spec.bn_eps,
        rng=np.random.default_rng((seed, 2)),
    )


def _build_optimizer(spec: OptimizerSpec, schedule: ScheduleSpec, model: MLP, total_steps: int):
    def sched(alpha0):
        return LrSchedule(alpha0, total_steps=total_steps, kind=schedule.kind)

    if spec.kind == "sgd":
        return SGD(
            model.trainable_params(),
            lr=sched(spec.alpha0),
            momentum=spec.momentum,
            weight_decay=spec.weight_decay,
            decay_params=model.vector_params(),
        )
    if spec.kind == "adam":
        return Adam(model.trainable_params(), sched(spec.alpha0),
                    beta1=spec.beta1, beta2=spec.beta2, eps=spec.eps)
    group = ParamGroup(
        vector_params=model.vector_params(), scalar_params=model.scalar_params()
    )
    return NDAdam(group, sched(spec.alpha0_vector), sched(spec.alpha0_scalar),
                  beta1=spec.beta1, beta2=spec.beta2, eps=spec.eps)


def _resolve_output_dir(config: ExperimentConfig) -> Path:
    override = os.environ.get(OUTPUT_DIR_ENV)
    return Path(override) if override else Path(config.output_dir)


def _evaluate(model: MLP, dataset: Dataset) -> tuple[float, float]:
    logits = model.forward(Tensor(dataset.features), training=False)
    loss = softmax_cross_entropy(logits, dataset.labels).item()
    acc = float(np.mean(np.argmax(logits.data, axis=1) == dataset.labels))
    return loss, acc


def run(config: ExperimentConfig) -> RunLog:
    """Train per the config; write metrics, diagnostics, summary, checkpoint."""
    config.validate()
    out_dir = _resolve_output_dir(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_path = out_dir / "config_echo.json"
    with open(echo_path, "w") as f:
        json.dump(config.to_dict(), f, indent=2)

    train, test = _build_dataset(config.dataset, config.seed)
    model = _build_model(config.model, train.feature_dim, train.num_classes, config.seed)
    batches = BatchIterator(train, config.schedule.batch_size, seed=(config.seed, 3))
    total_steps = config.schedule.epochs * batches.steps_per_epoch()
    optimizer = _build_optimizer(config.optimizer, config.schedule, model, total_steps)

    diag_spec = config.diagnostics
    layer_ids = None if diag_spec.layers == "all" else list(diag_spec.layers)
    recorder = DiagnosticsRecorder(layer_ids=layer_ids, stride=diag_spec.stride,
                                   per_unit=diag_spec.per_unit)
    watched = [
        layer for layer in model.layers
        if layer_ids is None or layer.name in layer_ids
    ]

    trainables = model.trainable_params()
    is_sgd = isinstance(optimizer, SGD)
    epochs: list[EpochMetrics] = []
    step = 0
    for epoch in range(config.schedule.epochs):
        started = time.perf_counter()
        loss_sum = 0.0
        hit_sum = 0
        seen = 0
        for feats, labels in batches.batches(epoch):
            x = Tensor(feats)
            with Tape() as tape:
                logits = model.forward(x, training=True)
                loss = softmax_cross_entropy(logits, labels)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NanLossError(f"loss became non-finite at step {step} (epoch {epoch})")
            grads = tape.gradients(loss, trainables)

            sample = recorder.wants(step)
            snapshots = (
                {layer.name: layer.weights.data.copy() for layer in watched}
                if sample
                else None
            )
            optimizer.step(grads)
            if snapshots is not None:
                for layer in watched:
                    w = layer.weights
                    recorder.record_layer(
                        step,
                        layer.name,
                        snapshots[layer.name],
                        w.data,
                        loss_grad=grads[w].data,
                        loss_delta=optimizer.last_loss_delta[id(w)] if is_sgd else None,
                        decay_delta=optimizer.last_decay_delta[id(w)] if is_sgd else None,
                    )

            loss_sum += loss_value * len(labels)
            hit_sum += int(np.sum(np.argmax(logits.data, axis=1) == labels))
            seen += len(labels)
            step += 1
        test_loss, test_acc = _evaluate(model, test)
        epochs.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=loss_sum / seen,
                train_accuracy=hit_sum / seen,
                test_loss=test_loss,
                test_accuracy=test_acc,
                wall_time=time.perf_counter() - started,
            )
        )

    metrics_path = out_dir / "metrics.csv"
    with open(metrics_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_accuracy", "test_loss", "test_accuracy"])
        for m in epochs:
            writer.writerow(
                [m.epoch, repr(m.train_loss), repr(m.train_accuracy),
                 repr(m.test_loss), repr(m.test_accuracy)]
            )

    diagnostics_path = out_dir / "diagnostics.csv"
    recorder.write_csv(diagnostics_path)

    checkpoint_path = out_dir / "checkpoint.json"
    with open(checkpoint_path, "w") as f:
        json.dump({"model": model.state_dict(), "optimizer": optimizer.state_dict()}, f)

    summary_path = out_dir / "summary.json"
    final = epochs[-1]
    with open(summary_path, "w") as f:
        json.dump(
            {
                "steps": step,
                "final_train_loss": final.train_loss,
                "final_train_accuracy": final.train_accuracy,
                "final_test_loss": final.test_loss,
                "final_test_accuracy": final.test_accuracy,
                "epoch_wall_times": [m.wall_time for m in epochs],
                "total_wall_time": sum(m.wall_time for m in epochs),
                "config_echo": echo_path.name,
                "checkpoint": checkpoint_path.name,
            },
            f,
            indent=2,
        )

    return RunLog(config, epochs, out_dir, metrics_path, diagnostics_path, summary_path)


def _comparable_view(config: ExperimentConfig) -> dict:
    view = config.to_dict()
    view.pop("optimizer")
    view.pop("seed")
    view.pop("output_dir")
    view["model"].pop("head")
    view["model"].pop("head_gamma")
    return view


def config_label(config: ExperimentConfig) -> str:
    label = config.optimizer.kind
    if config.model.head == "bn_softmax":
        label += f"+bn_softmax(gamma={config.model.head_gamma:g})"
    return label


def compare(
    configs: list[ExperimentConfig],
    seeds: list[int],
    allow_model_mismatch: bool = False,
    output_dir: str | Path | None = None,
) -> dict:
    """Run each config across the seeds; report medians per config.

    Rows keep the input config order.  Configs must agree on everything but
    the optimizer and the classification head unless explicitly allowed.
    """
    if not configs:
        raise ConfigError("compare needs at least one config")
    if not seeds:
        raise ConfigError("compare needs at least one seed")
    for config in configs:
        config.validate()
    if not allow_model_mismatch:
        reference = _comparable_view(configs[0])
        for i, config in enumerate(configs[1:], start=1):
            if _comparable_view(config) != reference:
                raise ConfigError(
                    f"config {i} differs from config 0 beyond optimizer/head; "
                    "pass allow_model_mismatch to override"
                )
    base = Path(output_dir) if output_dir is not None else _resolve_output_dir(configs[0])
    base.mkdir(parents=True, exist_ok=True)

    rows = []
    for idx, config in enumerate(configs):
        losses, accuracies = [], []
        for seed in seeds:
            run_config = ExperimentConfig.from_dict(config.to_dict())
            run_config.seed = seed
            run_config.output_dir = str(base / f"config{idx}_seed{seed}")
            log = run(run_config)
            losses.append(log.final.train_loss)
            accuracies.append(log.final.test_accuracy)
        rows.append(
            {
                "label": config_label(config),
                "median_final_train_loss": float(np.median(losses)),
                "median_test_accuracy": float(np.median(accuracies)),
                "train_losses": losses,
                "test_accuracies": accuracies,
            }
        )

    table_lines = [f"{'config':<32} {'train loss':>12} {'test acc':>10}"]
    for row in rows:
        table_lines.append(
            f"{row['label']:<32} {row['median_final_train_loss']:>12.4f} "
            f"{row['median_test_accuracy']:>10.4f}"
        )
    result = {"seeds": list(seeds), "rows": rows, "table": "\n".join(table_lines)}
    with open(base / "comparison.json", "w") as f:
        json.dump(result, f, indent=2)
    return result


def distinct_logits(num_classes: int, seed: int, low: float = -2.0, high: float = 2.0) -> np.ndarray:
    """Random logits with pairwise gaps large enough for the saturated probe."""
    rng = np.random.default_rng(seed)
    base = np.linspace(low, high, num_classes)
    jitter = rng.uniform(-0.2, 0.2, size=num_classes) * (high - low) / (4 * num_classes)
    return rng.permutation(base + jitter)


def probe_softmax(
    num_classes: int | None = None,
    etas=DEFAULT_ETAS,
    target: int = 0,
    seed: int = 0,
    logits=None,
    output_path=None,
) -> list[tuple[float, int, float]]:
    """Gradient-ratio sweep rows ``(eta, class_index, ratio)``.

    Either explicit ``logits`` or a class count (random distinct logits,
    deterministic in ``seed``).
    """
    if logits is None:
        if num_classes is None or num_classes < 2:
            raise ConfigError("probe needs num_classes >= 2 or explicit logits")
        logits = distinct_logits(num_classes, seed)
    logits = np.asarray(logits, dtype=np.float64)
    etas = [float(e) for e in etas]
    if any(e <= 0 for e in etas):
        raise ConfigError("eta values must be positive")
    if not 0 <= target < logits.size:
        raise ConfigError(f"target {target} out of range for {logits.size} classes")
    rows = []
    class_indices = [c for c in range(logits.size) if c != target]
    for eta in etas:
        ratios = softmax_grad_ratio_probe(logits, target=target, eta=eta)
        for c, ratio in zip(class_indices, ratios):
            rows.append((eta, c, float(ratio)))
    if output_path is not None:
        with open(output_path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["eta", "class", "ratio"])
            for eta, c, ratio in rows:
                writer.writerow([repr(eta), c, repr(ratio)])
    return rows
