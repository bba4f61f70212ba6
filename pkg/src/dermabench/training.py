"""Training loop: categorical cross-entropy, Adam, early stopping, best checkpoint."""
from __future__ import annotations

import logging
import math
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch

from .data import ClassWeights, DatasetBundle, Split, normalize_array, resize_array, describe_preprocessing
from .errors import ConfigError, TrainingError
from .models import ModelHandle, frozen_digest

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-7
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-7


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    monitor: str = "validation_loss"
    seed: int = 0
    class_weights: ClassWeights | None = None
    deterministic: bool = True

    loss = "categorical_cross_entropy"

    def __post_init__(self):
        # lr == 0 is accepted so that a run can be frozen in place deliberately
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.monitor != "validation_loss":
            raise ConfigError(f"only validation_loss can be monitored, got {self.monitor!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = list(self.class_weights.weights) if self.class_weights else None
        d["loss"] = self.loss
        d["optimizer"] = {"name": "adam", "beta1": ADAM_BETAS[0], "beta2": ADAM_BETAS[1], "epsilon": ADAM_EPS}
        return d


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    validation_loss: float
    train_accuracy: float
    validation_accuracy: float


@dataclass
class TrainRun:
    config: TrainConfig
    history: list[EpochRecord]
    best_epoch: int
    checkpoint_path: Path
    stopped_early: bool
    preprocessing: dict = field(default_factory=dict)

    @property
    def best_validation_loss(self) -> float:
        return self.history[self.best_epoch - 1].validation_loss


# -- loss -------------------------------------------------------------------


def cross_entropy(predicted, target, weight: float = 1.0) -> float:
    """``-w * log(max(p[true], 1e-7))`` for a single probability vector."""
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ConfigError(f"predicted {p.shape} and target {t.shape} must be equal-length vectors")
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
        raise ConfigError("predicted must be a probability vector")
    if not (np.isin(t, (0.0, 1.0)).all() and t.sum() == 1.0):
        raise ConfigError("target must be one-hot")
    if not weight > 0:
        raise ConfigError(f"weight must be positive, got {weight}")
    return float(-weight * math.log(max(p[int(t.argmax())], PROB_FLOOR)))


def sample_losses(probs: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    picked = probs.gather(1, labels[:, None])[:, 0].clamp_min(PROB_FLOOR)
    loss = -torch.log(picked)
    if weights is not None:
        loss = loss * weights[labels]
    return loss


# -- early stopping ---------------------------------------------------------


@dataclass(frozen=True)
class EarlyStopState:
    best_value: float = math.inf
    epochs_since_best: int = 0


def early_stop_update(
    state: EarlyStopState, new_value: float, patience: int
) -> tuple[EarlyStopState, Literal["continue", "stop"]]:
    """Strict improvement resets the counter; the run stops once it reaches ``patience``."""
    if patience < 1:
        raise ConfigError(f"patience must be >= 1, got {patience}")
    if new_value < state.best_value:
        return EarlyStopState(new_value, 0), "continue"
    state = EarlyStopState(state.best_value, state.epochs_since_best + 1)
    return state, "stop" if state.epochs_since_best >= patience else "continue"


# -- batches ----------------------------------------------------------------


def preprocessing_for(model: ModelHandle) -> dict:
    kind = model.backbone_kind
    if kind == "none":
        info = describe_preprocessing("unit_interval")
    else:
        info = describe_preprocessing("backbone_preprocess", kind)
    return {**info, "input_side": model.input_side, "interpolation": "bilinear"}


def prepare_batch(images: np.ndarray, model: ModelHandle) -> torch.Tensor:
    """uint8 NHWC -> float32 NCHW at the model's input side."""
    images = resize_array(images, model.input_side, allow_downscale=True)
    kind = model.backbone_kind
    if kind == "none":
        x = normalize_array(images, "unit_interval")
    else:
        x = normalize_array(images, "backbone_preprocess", kind)
    return torch.from_numpy(x.astype(np.float32)).permute(0, 3, 1, 2).contiguous()


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    # batch-norm cannot normalise a single sample in training mode
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def _weights_tensor(class_weights: ClassWeights | None) -> torch.Tensor | None:
    if class_weights is None:
        return None
    return torch.tensor(class_weights.weights, dtype=torch.float32)


# -- evaluation -------------------------------------------------------------


def predict(model: ModelHandle, split: Split, batch_size: int = 64) -> np.ndarray:
    if len(split) == 0:
        raise TrainingError("cannot evaluate an empty split")
    net = model.network
    was_training = net.training
    net.eval()
    out = []
    with torch.no_grad():
        for idx in _batches(np.arange(len(split)), batch_size):
            out.append(net(prepare_batch(split.images[idx], model)))
    net.train(was_training)
    return torch.cat(out).double().numpy()


def evaluate(
    model: ModelHandle,
    split: Split,
    class_weights: ClassWeights | None = None,
    batch_size: int = 64,
) -> tuple[float, np.ndarray]:
    """Mean (optionally class-weighted) cross-entropy and the (N, 7) score matrix."""
    scores = predict(model, split, batch_size)
    probs = torch.from_numpy(scores)
    labels = torch.from_numpy(np.array(split.labels, dtype=np.int64))
    w = None if class_weights is None else torch.tensor(class_weights.weights, dtype=torch.float64)
    loss = sample_losses(probs, labels, w).mean().item()
    return loss, scores


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model: ModelHandle, path: str | Path) -> Path:
    """Persist the head only; the frozen backbone is rebuilt from its weights source."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save({"model": model.config.name, "head": model.network.head.state_dict()}, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(model: ModelHandle, path: str | Path) -> None:
    state = torch.load(path, map_location="cpu", weights_only=True)
    if state["model"] != model.config.name:
        raise TrainingError(f"checkpoint {path} belongs to {state['model']}, not {model.config.name}")
    model.network.head.load_state_dict(state["head"])


# -- training ---------------------------------------------------------------


def train(
    model: ModelHandle,
    bundle: DatasetBundle,
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
) -> TrainRun:
    for name in ("train", "validation"):
        if len(bundle.split(name)) == 0:
            raise TrainingError(f"{name} split is empty")
    cw = config.class_weights
    if cw is not None and len(cw) != model.config.head.output_units:
        raise ConfigError(f"class weights cover {len(cw)} classes, model has {model.config.head.output_units}")

    if checkpoint_dir is None:
        checkpoint_dir = tempfile.mkdtemp(prefix="dermabench-")
    ckpt = Path(checkpoint_dir) / "best.ckpt"

    if config.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    net = model.network
    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)
    weights = _weights_tensor(cw)
    digest = frozen_digest(model) if net.backbone is not None else None

    train_split = bundle.train
    history: list[EpochRecord] = []
    state = EarlyStopState()
    best_epoch = 0
    stopped = False
    for epoch in range(1, config.max_epochs + 1):
        net.train()
        loss_sum = 0.0
        correct = 0
        for b, idx in enumerate(_batches(rng.permutation(len(train_split)), config.batch_size)):
            x = prepare_batch(train_split.images[idx], model)
            y = torch.from_numpy(train_split.labels[idx])
            probs = net(x)
            loss = sample_losses(probs, y, weights).mean()
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch {b}; "
                    f"prob range [{probs.min().item():.3g}, {probs.max().item():.3g}]"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            correct += int((probs.argmax(1) == y).sum())

        val_loss, val_scores = evaluate(model, bundle.validation, cw)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / len(train_split),
            validation_loss=val_loss,
            train_accuracy=correct / len(train_split),
            validation_accuracy=float((val_scores.argmax(1) == bundle.validation.labels).mean()),
        )
        history.append(record)
        log.info(
            "epoch %d  loss %.4f  acc %.4f  val_loss %.4f  val_acc %.4f",
            epoch, record.train_loss, record.train_accuracy, val_loss, record.validation_accuracy,
        )

        state, decision = early_stop_update(state, val_loss, config.patience)
        if state.epochs_since_best == 0:
            best_epoch = epoch
            save_checkpoint(model, ckpt)
        if decision == "stop":
            stopped = True
            break

    load_checkpoint(model, ckpt)
    if digest is not None and frozen_digest(model) != digest:
        raise TrainingError("backbone parameters changed during training")
    return TrainRun(config, history, best_epoch, ckpt, stopped, preprocessing_for(model))
