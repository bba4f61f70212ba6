"""Frozen ImageNet backbones with trainable classification heads.

Seven named configurations are exposed through :func:`named_configs`.
A head is described as a flat list of :class:`LayerSpec` and built layer
by layer against the known input shape, so the manifest of a built model
mirrors the declarative description one-to-one.
"""
from __future__ import annotations

import hashlib
import logging
import os
import tempfile
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn
import torchvision

from .data import NUM_CLASSES
from .errors import BuildError, ChecksumError, ConfigError

log = logging.getLogger(__name__)

WEIGHTS_DIR_ENV = "DERMABENCH_WEIGHTS_DIR"
WEIGHTS_URL_ENV = "DERMABENCH_WEIGHTS_URL"

BACKBONES = ("resnet50", "efficientnetv2l", "none")
HEAD_VARIANTS = ("conv_head", "dense128_head", "dense64_head")

# Smallest input side for which the backbone still yields a 1x1 feature map.
MIN_INPUT_SIDE = {"resnet50": 32, "efficientnetv2l": 32, "none": 1}

_WEIGHT_FILES = {
    "resnet50": "resnet50-11ad3fa6.pth",
    "efficientnetv2l": "efficientnet_v2_l-59c71312.pth",
}
_DEFAULT_REGISTRY = "https://download.pytorch.org/models"


@dataclass(frozen=True)
class BackboneKind:
    kind: str
    pretraining: str = "imagenet"

    def __post_init__(self):
        if self.kind not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.kind!r}")

    @property
    def frozen(self) -> bool:
        return self.kind != "none"

    @property
    def present(self) -> bool:
        return self.kind != "none"


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv2d | max-pool | dropout | flatten | batch-norm | dense
    units: int = 0
    activation: str | None = None
    rate: float = 0.0

    def label(self) -> str:
        if self.kind in ("conv2d", "dense"):
            return f"{self.kind}({self.units}, {self.activation})"
        if self.kind == "dropout":
            return f"dropout({self.rate})"
        if self.kind == "max-pool":
            return "max-pool(2x2)"
        return self.kind


@dataclass(frozen=True)
class HeadConfig:
    variant: str
    dense_units: int = 128
    conv_dropout: float = 0.25
    dense_dropout: float = 0.5
    kernel_size: int = 3
    output_units: int = NUM_CLASSES

    def __post_init__(self):
        if self.variant not in HEAD_VARIANTS:
            raise ConfigError(f"unknown head variant {self.variant!r}")
        for rate in (self.conv_dropout, self.dense_dropout):
            if not 0 <= rate < 1:
                raise ConfigError(f"dropout rate {rate} outside [0, 1)")

    @property
    def dropout_rates(self) -> list[float]:
        return [s.rate for s in self.layers() if s.kind == "dropout"]

    def layers(self) -> list[LayerSpec]:
        out = LayerSpec("dense", self.output_units, "softmax")
        if self.variant != "conv_head":
            return [
                LayerSpec("flatten"),
                LayerSpec("batch-norm"),
                LayerSpec("dense", self.dense_units, "relu"),
                LayerSpec("batch-norm"),
                out,
            ]
        block = [
            LayerSpec("conv2d", 32, "relu"),
            LayerSpec("conv2d", 64, "relu"),
            LayerSpec("max-pool"),
            LayerSpec("dropout", rate=self.conv_dropout),
        ]
        return [
            *block,
            *block,
            LayerSpec("conv2d", 128, "relu"),
            LayerSpec("conv2d", 128, "relu"),
            LayerSpec("dropout", rate=self.conv_dropout),
            LayerSpec("flatten"),
            LayerSpec("batch-norm"),
            LayerSpec("dense", self.dense_units, "relu"),
            LayerSpec("dropout", rate=self.dense_dropout),
            LayerSpec("batch-norm"),
            out,
        ]


@dataclass(frozen=True)
class ModelConfig:
    name: str
    backbone: BackboneKind
    head: HeadConfig
    input_side: int
    use_class_weights: bool = False

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "backbone": self.backbone.kind,
            "pretraining": self.backbone.pretraining,
            "head": self.head.variant,
            "dense_units": self.head.dense_units,
            "dropout_rates": self.head.dropout_rates,
            "kernel_size": self.head.kernel_size,
            "input_side": self.input_side,
            "use_class_weights": self.use_class_weights,
        }


def named_configs() -> list[ModelConfig]:
    """The two experiment-1 and five experiment-2 configurations."""
    res50 = BackboneKind("resnet50")
    eff = BackboneKind("efficientnetv2l")
    conv = HeadConfig("conv_head", dense_units=128)
    return [
        ModelConfig("Res50_e", res50, conv, input_side=32),
        ModelConfig("Eff_e", eff, conv, input_side=32),
        ModelConfig("SM", BackboneKind("none"), conv, input_side=224),
        ModelConfig("Effv1_e", eff, conv, input_side=224),
        ModelConfig("Effv2_e", eff, HeadConfig("dense128_head", dense_units=128), input_side=224),
        ModelConfig("Effv3_e", eff, HeadConfig("dense64_head", dense_units=64), input_side=224),
        ModelConfig(
            "Effv4_e", eff, HeadConfig("dense64_head", dense_units=64), input_side=224, use_class_weights=True
        ),
    ]


def get_config(name: str) -> ModelConfig:
    for cfg in named_configs():
        if cfg.name == name:
            return cfg
    raise ConfigError(f"unknown model {name!r}; expected one of {[c.name for c in named_configs()]}")


# -- layers -----------------------------------------------------------------


class Dense(nn.Module):
    def __init__(self, in_features: int, units: int, activation: str):
        super().__init__()
        self.linear = nn.Linear(in_features, units)
        self.activation = activation

    def forward(self, x):
        x = self.linear(x)
        if self.activation == "relu":
            return torch.relu(x)
        return torch.softmax(x, dim=-1)


class Conv(nn.Module):
    def __init__(self, in_channels: int, filters: int, kernel_size: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, filters, kernel_size, padding="same")

    def forward(self, x):
        return torch.relu(self.conv(x))


def _make_layer(spec: LayerSpec, in_shape: tuple[int, ...], kernel_size: int) -> nn.Module:
    if spec.kind == "conv2d":
        if len(in_shape) != 3:
            raise BuildError(f"conv2d needs a spatial input, got shape {in_shape}")
        return Conv(in_shape[0], spec.units, kernel_size)
    if spec.kind == "max-pool":
        # ceil_mode pads like "same" pooling, so 1x1 maps stay 1x1
        return nn.MaxPool2d(2, ceil_mode=True)
    if spec.kind == "dropout":
        return nn.Dropout(spec.rate)
    if spec.kind == "flatten":
        return nn.Flatten()
    if spec.kind == "batch-norm":
        if len(in_shape) != 1:
            raise BuildError(f"batch-norm expects a flat input, got shape {in_shape}")
        # Keras defaults: momentum 0.99 (torch momentum 0.01), epsilon 1e-3
        return nn.BatchNorm1d(in_shape[0], eps=1e-3, momentum=0.01)
    if spec.kind == "dense":
        if len(in_shape) != 1:
            raise BuildError(f"dense expects a flat input, got shape {in_shape}")
        return Dense(in_shape[0], spec.units, spec.activation)
    raise BuildError(f"unknown layer kind {spec.kind!r}")


class ClassifierNet(nn.Module):
    """Optional frozen backbone followed by a trainable head.

    The backbone is pinned to eval mode so that its batch-norm statistics
    never move, matching a non-trainable Keras base model.
    """

    def __init__(self, backbone: nn.Module | None, head: nn.Sequential):
        super().__init__()
        self.backbone = backbone
        self.head = head
        if backbone is not None:
            backbone.requires_grad_(False)
            backbone.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        if self.backbone is not None:
            self.backbone.eval()
        return self

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if self.backbone is None:
            return x
        with torch.no_grad():
            return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass(frozen=True)
class LayerInfo:
    kind: str
    output_shape: tuple[int, ...]
    params: int
    trainable: bool
    detail: str = ""


@dataclass
class ModelHandle:
    config: ModelConfig
    network: ClassifierNet
    input_side: int
    seed: int
    layer_manifest: list[LayerInfo]
    weights: dict = field(default_factory=dict)

    @property
    def backbone_kind(self) -> str:
        return self.config.backbone.kind

    def parameter_counts(self) -> tuple[int, int]:
        """(total, trainable)"""
        total = sum(p.numel() for p in self.network.parameters())
        trainable = sum(p.numel() for p in self.network.parameters() if p.requires_grad)
        return total, trainable


# -- backbone weights -------------------------------------------------------


def default_weights_dir() -> Path:
    return Path(os.environ.get(WEIGHTS_DIR_ENV, "./weights"))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fetch_backbone_weights(kind: str, weights_dir: str | os.PathLike | None = None) -> Path:
    """Download torchvision ImageNet weights into the cache (atomic rename).

    torchvision file names embed the leading hex digits of the file's
    SHA-256, which is verified before the file is moved into place.
    """
    fname = _WEIGHT_FILES[kind]
    wdir = Path(weights_dir) if weights_dir is not None else default_weights_dir()
    target = wdir / fname
    prefix = fname.rsplit("-", 1)[1].split(".")[0]
    if target.is_file():
        return target
    url = os.environ.get(WEIGHTS_URL_ENV, _DEFAULT_REGISTRY).rstrip("/") + "/" + fname
    wdir.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=wdir, suffix=".part")
    try:
        with os.fdopen(fd, "wb") as out, urllib.request.urlopen(url) as resp:
            for chunk in iter(lambda: resp.read(1 << 20), b""):
                out.write(chunk)
        if not _sha256(Path(tmp)).startswith(prefix):
            raise ChecksumError(f"{url}: sha256 does not start with {prefix}")
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return target


def _torchvision_model(kind: str) -> nn.Module:
    if kind == "resnet50":
        return torchvision.models.resnet50(weights=None)
    return torchvision.models.efficientnet_v2_l(weights=None)


def _feature_extractor(kind: str, model: nn.Module) -> nn.Module:
    # keep the final convolutional feature map, drop global pooling and classifier
    if kind == "resnet50":
        return nn.Sequential(*list(model.children())[:-2])
    return model.features


def build_backbone(kind: str, weights: str, seed: int) -> tuple[nn.Module, dict]:
    """``weights`` is ``"imagenet"``, ``"random"`` or a path to a state dict."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = _torchvision_model(kind)
    info = {"source": weights}
    if weights != "random":
        path = fetch_backbone_weights(kind) if weights == "imagenet" else Path(weights)
        if not path.is_file():
            raise BuildError(f"backbone weights file {path} not found")
        state = torch.load(path, map_location="cpu", weights_only=True)
        try:
            model.load_state_dict(state)
        except RuntimeError as exc:
            raise BuildError(f"weights at {path} do not fit {kind}: {exc}") from exc
        info.update(path=str(path), sha256=_sha256(path))
    return _feature_extractor(kind, model), info


# -- building ---------------------------------------------------------------


def _init_head(head: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    for m in head.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            nn.init.xavier_uniform_(m.weight, generator=gen)
            nn.init.zeros_(m.bias)


def _source_label(weights: str) -> str:
    return weights if weights in ("imagenet", "random") else "local file"


def _count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def build_model(
    config: ModelConfig,
    input_side: int | None = None,
    seed: int = 0,
    weights: str = "imagenet",
) -> ModelHandle:
    side = config.input_side if input_side is None else int(input_side)
    kind = config.backbone.kind
    if side < MIN_INPUT_SIDE[kind]:
        raise BuildError(
            f"{config.name}: input side {side} is below the {kind} minimum of {MIN_INPUT_SIDE[kind]}"
        )

    manifest: list[LayerInfo] = []
    weights_info: dict = {}
    backbone = None
    shape: tuple[int, ...] = (3, side, side)
    if config.backbone.present:
        backbone, weights_info = build_backbone(kind, weights, seed)
        backbone.eval()
        with torch.no_grad():
            shape = tuple(backbone(torch.zeros(1, 3, side, side)).shape[1:])
        manifest.append(
            LayerInfo("backbone", shape, _count(backbone), False, f"{kind} ({_source_label(weights)}, frozen)")
        )

    layers = []
    probe = torch.zeros(2, *shape)
    for spec in config.head.layers():
        layer = _make_layer(spec, shape, config.head.kernel_size)
        layer.eval()
        with torch.no_grad():
            probe = layer(probe)
        shape = tuple(probe.shape[1:])
        layers.append(layer)
        manifest.append(LayerInfo(spec.kind, shape, _count(layer), True, spec.label()))
    head = nn.Sequential(*layers)
    _init_head(head, seed)

    net = ClassifierNet(backbone, head)
    return ModelHandle(config, net, side, seed, manifest, weights_info)


def describe_model(handle: ModelHandle) -> str:
    rows = [f"model {handle.config.name}  input 3x{handle.input_side}x{handle.input_side}  seed {handle.seed}"]
    rows.append(f"{'#':>3}  {'layer':<20}{'output':<12}{'params':>11}  trainable")
    for i, info in enumerate(handle.layer_manifest):
        shape = "x".join(str(d) for d in info.output_shape)
        label = info.kind if info.kind == "backbone" else info.detail
        line = f"{i:>3}  {label:<20}{shape:<12}{info.params:>11}  {'yes' if info.trainable else 'no':<9}"
        if info.kind == "backbone":
            line += f"  {info.detail}"
        rows.append(line.rstrip())
    total, trainable = handle.parameter_counts()
    rows.append(f"total params {total}  trainable {trainable}  frozen {total - trainable}")
    return "\n".join(rows) + "\n"


def _state_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def frozen_digest(handle: ModelHandle) -> str:
    """SHA-256 over every backbone parameter and buffer."""
    if handle.network.backbone is None:
        raise BuildError(f"{handle.config.name} has no backbone to digest")
    return _state_digest(handle.network.backbone)


def head_digest(handle: ModelHandle) -> str:
    return _state_digest(handle.network.head)
