"""End-to-end experiment runs and their on-disk records.

A run directory looks like::

    runs/<run-id>/run.json
    runs/<run-id>/report.csv
    runs/<run-id>/confusion.png
    runs/<run-id>/curves.png
    runs/<run-id>/checkpoints/best.ckpt
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import traceback
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
import torchvision

from . import __version__
from .data import (
    DESCRIPTORS,
    DatasetDescriptor,
    compute_class_weights,
    get_descriptor,
    load_dataset,
    stratified_subsample,
)
from .errors import ConfigError, StageError, TrainingError
from .metrics import MODES, ConfusionMatrix, MetricsReport, confusion_matrix, full_report
from .models import ModelConfig, build_model, frozen_digest, get_config, named_configs
from .plotting import emit_confusion_plot, emit_curves
from .training import EpochRecord, TrainConfig, evaluate, load_checkpoint, train

log = logging.getLogger(__name__)

METRICS_MODES = (*MODES, "both")
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"class_weights"}


@dataclass
class ExperimentSpec:
    dataset: DatasetDescriptor
    model: str
    train: dict = field(default_factory=dict)
    subsample_fraction: float | None = None
    metrics_mode: str = "both"
    output_dir: str = "runs"
    data_path: str | None = None
    weights: str = "imagenet"
    input_side: int | None = None

    def validate(self) -> None:
        names = [c.name for c in named_configs()]
        if self.model not in names:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {names}")
        if self.metrics_mode not in METRICS_MODES:
            raise ConfigError(f"metrics_mode must be one of {METRICS_MODES}, got {self.metrics_mode!r}")
        if self.subsample_fraction is not None and not 0 < self.subsample_fraction <= 1:
            raise ConfigError(f"subsample_fraction must lie in (0, 1], got {self.subsample_fraction}")
        unknown = set(self.train) - _TRAIN_KEYS
        if unknown:
            raise ConfigError(f"unknown train settings {sorted(unknown)}")
        self.train_config()

    def model_config(self) -> ModelConfig:
        return get_config(self.model)

    @property
    def seed(self) -> int:
        return int(self.train.get("seed", 0))

    @property
    def uses_class_weights(self) -> bool:
        return self.model_config().use_class_weights

    def train_config(self, class_weights=None) -> TrainConfig:
        return TrainConfig(**self.train, class_weights=class_weights)

    def to_dict(self) -> dict:
        ds = self.dataset
        dataset = ds.name if DESCRIPTORS.get(ds.name) == ds else ds.to_dict()
        return {
            "dataset": dataset,
            "model": self.model,
            "train": dict(self.train),
            "subsample_fraction": self.subsample_fraction,
            "metrics_mode": self.metrics_mode,
            "output_dir": str(self.output_dir),
            "data_path": None if self.data_path is None else str(self.data_path),
            "weights": self.weights,
            "input_side": self.input_side,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown experiment fields {sorted(unknown)}")
        ds = d.get("dataset")
        if isinstance(ds, str):
            d["dataset"] = get_descriptor(ds)
        elif isinstance(ds, dict):
            d["dataset"] = DatasetDescriptor.from_dict(ds)
        else:
            raise ConfigError("experiment config needs a dataset name or descriptor")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "ExperimentSpec":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:8]


@dataclass
class RunRecord:
    spec: ExperimentSpec
    run_id: str
    status: str = "running"
    reports: dict[str, MetricsReport] = field(default_factory=dict)
    confusion: ConfusionMatrix | None = None
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool | None = None
    test_loss: float | None = None
    train_config: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)
    failure: dict | None = None

    @property
    def run_dir(self) -> Path:
        return Path(self.spec.output_dir) / self.run_id

    @property
    def checkpoint_path(self) -> Path:
        return self.run_dir / "checkpoints" / "best.ckpt"

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "status": self.status,
            "spec": self.spec.to_dict(),
            "train_config": self.train_config,
            "reports": {m: r.to_dict() for m, r in self.reports.items()},
            "confusion": self.confusion.to_dict() if self.confusion is not None else None,
            "history": [dataclasses.asdict(e) for e in self.history],
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "test_loss": self.test_loss,
            "checkpoint": "checkpoints/best.ckpt",
            "environment": self.environment,
            "failure": self.failure,
        }

    @classmethod
    def from_dict(cls, d: dict, output_dir: str | os.PathLike | None = None) -> "RunRecord":
        spec = ExperimentSpec.from_dict(d["spec"])
        if output_dir is not None:
            spec.output_dir = str(output_dir)
        return cls(
            spec=spec,
            run_id=d["run_id"],
            status=d["status"],
            reports={m: MetricsReport.from_dict(r) for m, r in d["reports"].items()},
            confusion=ConfusionMatrix.from_dict(d["confusion"]) if d.get("confusion") else None,
            history=[EpochRecord(**e) for e in d["history"]],
            best_epoch=d.get("best_epoch"),
            stopped_early=d.get("stopped_early"),
            test_loss=d.get("test_loss"),
            train_config=d.get("train_config", {}),
            environment=d.get("environment", {}),
            failure=d.get("failure"),
        )

    def save(self) -> Path:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / "run.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        tmp.replace(path)
        return path

    def report_csv(self) -> str:
        lines = ["mode," + ",".join(("loss", "acc", "precision", "auc", "recall"))]
        for mode, r in self.reports.items():
            lines.append(mode + "," + ",".join(f"{v:.4f}" for v in r.row()))
        return "\n".join(lines) + "\n"


def load_record(run_dir: str | os.PathLike) -> RunRecord:
    """Load ``run.json``; the record's output directory is re-anchored to where it was found."""
    run_dir = Path(run_dir)
    with open(run_dir / "run.json", encoding="utf-8") as f:
        d = json.load(f)
    return RunRecord.from_dict(d, output_dir=run_dir.parent)


def new_run_id(spec: ExperimentSpec) -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
    return f"{stamp}-{spec.config_hash()}"


def environment_info() -> dict:
    return {
        "dermabench": __version__,
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "torchvision": torchvision.__version__,
        "deterministic_algorithms": torch.are_deterministic_algorithms_enabled(),
        "torch_threads": torch.get_num_threads(),
    }


def _prepare_data(spec: ExperimentSpec):
    bundle = load_dataset(spec.dataset, spec.data_path)
    if spec.subsample_fraction is not None:
        bundle = stratified_subsample(bundle, spec.subsample_fraction, spec.seed)
    return bundle


def run_experiment(spec: ExperimentSpec, run_id: str | None = None) -> RunRecord:
    """load -> preprocess -> build -> train -> evaluate -> metrics -> report.

    A failing stage persists the partial record with ``status="failed"``
    and re-raises as :class:`StageError`.
    """
    spec.validate()
    record = RunRecord(spec, run_id or new_run_id(spec))
    while record.run_dir.exists():
        record.run_id += "x"
    record.environment = environment_info()
    stage = "load"
    try:
        bundle = load_dataset(spec.dataset, spec.data_path)
        record.environment["dataset"] = {
            "descriptor": bundle.descriptor.to_dict(),
            "archive_sha256": bundle.archive_sha256,
        }

        stage = "preprocess"
        if spec.subsample_fraction is not None:
            bundle = stratified_subsample(bundle, spec.subsample_fraction, spec.seed)
        record.environment["dataset"]["counts"] = list(bundle.counts)
        record.environment["dataset"]["transforms"] = [[op, info] for op, info in bundle.transforms]
        weights = compute_class_weights(bundle.train) if spec.uses_class_weights else None
        cfg = spec.train_config(weights)
        record.train_config = cfg.to_dict()
        record.environment["seeds"] = {"train": cfg.seed, "model": cfg.seed, "subsample": cfg.seed}

        stage = "build"
        model = build_model(spec.model_config(), spec.input_side, seed=cfg.seed, weights=spec.weights)
        record.environment["model"] = {**spec.model_config().to_dict(), "input_side": model.input_side}
        record.environment["backbone_weights"] = model.weights
        if model.network.backbone is not None:
            record.environment["backbone_digest"] = frozen_digest(model)

        stage = "train"
        run = train(model, bundle, cfg, record.checkpoint_path.parent)
        record.history = run.history
        record.best_epoch = run.best_epoch
        record.stopped_early = run.stopped_early
        record.environment["preprocessing"] = run.preprocessing
        record.environment["deterministic_algorithms"] = torch.are_deterministic_algorithms_enabled()

        stage = "evaluate"
        test_loss, scores = evaluate(model, bundle.test, weights)
        record.test_loss = test_loss

        stage = "metrics"
        record.confusion = confusion_matrix(scores, bundle.test.labels)
        reports = full_report(scores, bundle.test.labels, test_loss, spec.metrics_mode)
        record.reports = reports if spec.metrics_mode == "both" else {spec.metrics_mode: reports}
        if "threshold_micro" not in record.reports:
            # comparison tables read the thresholded reduction
            record.reports["threshold_micro"] = full_report(scores, bundle.test.labels, test_loss, "threshold_micro")

        stage = "report"
        record.status = "completed"
        record.save()
        write_artifacts(record)
    except Exception as exc:
        record.status = "failed"
        record.failure = {"stage": stage, "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()}
        record.save()
        raise StageError(stage, exc) from exc
    log.info("run %s completed in %s", record.run_id, record.run_dir)
    return record


def write_artifacts(record: RunRecord, out_dir: str | os.PathLike | None = None) -> list[Path]:
    out = Path(out_dir) if out_dir is not None else record.run_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(record.report_csv(), encoding="utf-8")
    title = f"{record.spec.model} on {record.spec.dataset.name}"
    paths = [out / "report.csv"]
    if record.confusion is not None:
        paths.append(emit_confusion_plot(record.confusion, out / "confusion.png", title))
    if record.history:
        paths.append(emit_curves(record.history, out / "curves.png", title))
    return paths


def reevaluate_record(run_dir: str | os.PathLike, split: str = "test") -> tuple[float, float]:
    """Rebuild the model from a persisted record, restore its checkpoint and
    re-compute the loss on ``split``. Returns ``(stored, recomputed)``."""
    record = load_record(run_dir)
    if record.status != "completed":
        raise TrainingError(f"run {record.run_id} did not complete ({record.status})")
    spec = record.spec
    seed = int(record.train_config.get("seed", spec.seed))
    model = build_model(spec.model_config(), record.environment["model"]["input_side"], seed=seed, weights=spec.weights)
    if model.network.backbone is not None and frozen_digest(model) != record.environment.get("backbone_digest"):
        raise TrainingError("rebuilt backbone differs from the one used for training")
    load_checkpoint(model, record.checkpoint_path)
    bundle = _prepare_data(spec)
    weights = compute_class_weights(bundle.train) if spec.uses_class_weights else None
    loss, _ = evaluate(model, bundle.split(split), weights)
    if split == "test":
        stored = record.test_loss
    elif split == "validation":
        stored = record.history[record.best_epoch - 1].validation_loss
    else:
        raise ConfigError("stored losses exist for the test and validation splits only")
    return stored, loss
