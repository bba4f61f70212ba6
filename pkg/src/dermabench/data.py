"""Dataset ingestion for DermaMNIST and DermaMNIST-C.

Archives are the MedMNIST-style ``.npz`` files holding
``{train,val,test}_{images,labels}`` arrays. Images are kept as uint8
NHWC arrays; conversion to float tensors happens per batch in the trainer
so that 224px datasets never have to be materialised as float32.
"""
from __future__ import annotations

import enum
import hashlib
import logging
import math
import os
import tempfile
import urllib.request
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    ArchiveMissingError,
    ChecksumError,
    ConfigError,
    CorruptionError,
    DatasetError,
    IntegrityError,
)

log = logging.getLogger(__name__)

NUM_CLASSES = 7
SPLITS = ("train", "validation", "test")
_ARCHIVE_PREFIX = {"train": "train", "validation": "val", "test": "test"}

DATA_DIR_ENV = "DERMABENCH_DATA_DIR"
DATA_URL_ENV = "DERMABENCH_DATA_URL"


class ClassLabel(enum.IntEnum):
    actinic_keratoses_iec = 0
    basal_cell_carcinoma = 1
    benign_keratosis = 2
    dermatofibroma = 3
    melanoma = 4
    melanocytic_nevi = 5
    vascular_lesions = 6

    @property
    def code(self) -> int:
        return int(self)


CLASS_NAMES: tuple[str, ...] = tuple(c.name for c in ClassLabel)


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    label: ClassLabel


@dataclass(frozen=True)
class DatasetDescriptor:
    """Static facts about a dataset release.

    ``expected_counts`` is checked exactly when given. Releases that only
    publish a total and a split ratio use ``expected_total`` and
    ``split_ratio`` instead, and the exact counts are taken from the archive.
    """

    name: str
    resolution: int
    expected_counts: tuple[int, int, int] | None = None
    class_count: int = NUM_CLASSES
    expected_total: int | None = None
    split_ratio: tuple[float, float, float] | None = None
    ratio_tolerance: float = 0.01
    filename: str = ""
    md5: str | None = None
    url: str | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "resolution": self.resolution,
            "expected_counts": list(self.expected_counts) if self.expected_counts else None,
            "class_count": self.class_count,
            "expected_total": self.expected_total,
            "split_ratio": list(self.split_ratio) if self.split_ratio else None,
            "ratio_tolerance": self.ratio_tolerance,
            "filename": self.filename,
            "md5": self.md5,
            "url": self.url,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetDescriptor":
        d = dict(d)
        for key in ("expected_counts", "split_ratio"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


DERMAMNIST = DatasetDescriptor(
    name="DermaMNIST",
    resolution=28,
    expected_total=10015,
    split_ratio=(0.7, 0.1, 0.2),
    filename="dermamnist.npz",
    md5="0744692d530f8e62ec473284d019b0c7",
    url="https://zenodo.org/records/10519652/files/dermamnist.npz",
)

DERMAMNIST_C = DatasetDescriptor(
    name="DermaMNIST-C",
    resolution=224,
    expected_counts=(8208, 575, 1232),
    filename="dermamnist_c_224.npz",
)

DESCRIPTORS = {d.name: d for d in (DERMAMNIST, DERMAMNIST_C)}


def get_descriptor(name: str) -> DatasetDescriptor:
    try:
        return DESCRIPTORS[name]
    except KeyError:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {sorted(DESCRIPTORS)}") from None


@dataclass(frozen=True)
class Split:
    """One split as parallel arrays: ``images`` (N, H, W, 3) uint8 and ``labels`` (N,) int64."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], ClassLabel(int(self.labels[i])))

    def __iter__(self) -> Iterator[LabeledImage]:
        for i in range(len(self)):
            yield self[i]

    @property
    def side(self) -> int:
        return int(self.images.shape[1])

    def class_counts(self, num_classes: int = NUM_CLASSES) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)

    def take(self, indices: np.ndarray) -> "Split":
        return Split(self.images[indices], self.labels[indices])


@dataclass(frozen=True)
class DatasetBundle:
    descriptor: DatasetDescriptor
    train: Split
    validation: Split
    test: Split
    # (operation, details) pairs applied after loading, e.g. resizing
    transforms: tuple = ()
    archive_sha256: str | None = None

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)

    @property
    def counts(self) -> tuple[int, int, int]:
        return (len(self.train), len(self.validation), len(self.test))

    @property
    def side(self) -> int:
        return self.train.side


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_archive(descriptor: DatasetDescriptor, path: str | os.PathLike | None) -> Path:
    """Accept either the archive itself or a directory containing it."""
    if path is None:
        path = default_data_dir()
    p = Path(path)
    if p.is_dir():
        p = p / descriptor.filename
    return p


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "./data"))


def _check_split(name: str, images: np.ndarray, labels: np.ndarray, descriptor: DatasetDescriptor):
    if images.ndim != 4 or images.shape[-1] != 3:
        raise CorruptionError(f"{name}: expected N x H x W x 3 images, got shape {images.shape}")
    if images.dtype != np.uint8:
        raise CorruptionError(f"{name}: expected uint8 images, got {images.dtype}")
    side = descriptor.resolution
    if images.shape[1:3] != (side, side):
        raise CorruptionError(
            f"{name}: expected {side}x{side} images for {descriptor.name}, got "
            f"{images.shape[1]}x{images.shape[2]}"
        )
    if labels.ndim == 2 and labels.shape[1] == 1:
        labels = labels[:, 0]
    if labels.ndim != 1:
        raise CorruptionError(f"{name}: expected N x 1 labels, got shape {labels.shape}")
    if len(labels) != len(images):
        raise CorruptionError(f"{name}: {len(images)} images but {len(labels)} labels")
    if not np.issubdtype(labels.dtype, np.integer):
        raise CorruptionError(f"{name}: labels must be integers, got {labels.dtype}")
    if len(labels) and (labels.min() < 0 or labels.max() >= descriptor.class_count):
        bad = labels[(labels < 0) | (labels >= descriptor.class_count)]
        raise CorruptionError(
            f"{name}: label {int(bad[0])} outside [0, {descriptor.class_count - 1}]"
        )
    return labels.astype(np.int64)


def check_counts(descriptor: DatasetDescriptor, counts: Sequence[int]) -> None:
    """Raise :class:`IntegrityError` when split sizes disagree with ``descriptor``."""
    counts = tuple(int(c) for c in counts)
    if descriptor.expected_counts is not None and counts != tuple(descriptor.expected_counts):
        raise IntegrityError(
            f"{descriptor.name}: expected (train, validation, test) = "
            f"{tuple(descriptor.expected_counts)}, archive has {counts}"
        )
    total = sum(counts)
    if descriptor.expected_total is not None and total != descriptor.expected_total:
        raise IntegrityError(
            f"{descriptor.name}: expected {descriptor.expected_total} images in total, archive has {total}"
        )
    if descriptor.split_ratio is not None:
        for split, n, r in zip(SPLITS, counts, descriptor.split_ratio):
            if abs(n / total - r) > descriptor.ratio_tolerance:
                raise IntegrityError(
                    f"{descriptor.name}: {split} fraction {n / total:.4f} deviates from "
                    f"{r:.2f} by more than {descriptor.ratio_tolerance}"
                )


def load_dataset(descriptor: DatasetDescriptor, path: str | os.PathLike | None = None) -> DatasetBundle:
    """Load and validate an archive against ``descriptor``.

    When the descriptor carries no exact counts, the counts read from the
    archive are recorded on the returned bundle's descriptor.
    """
    archive = resolve_archive(descriptor, path)
    if not archive.is_file():
        raise ArchiveMissingError(f"{descriptor.name} archive not found at {archive}")
    try:
        npz = np.load(archive, allow_pickle=False)
    except Exception as exc:
        raise CorruptionError(f"cannot read {archive}: {exc}") from exc
    splits = {}
    with npz:
        for split in SPLITS:
            prefix = _ARCHIVE_PREFIX[split]
            try:
                images = npz[f"{prefix}_images"]
                labels = npz[f"{prefix}_labels"]
            except KeyError as exc:
                raise CorruptionError(f"{archive}: missing array {exc}") from None
            labels = _check_split(split, images, labels, descriptor)
            splits[split] = Split(images, labels)

    counts = tuple(len(splits[s]) for s in SPLITS)
    check_counts(descriptor, counts)
    train_counts = splits["train"].class_counts(descriptor.class_count)
    if (train_counts == 0).any():
        missing = [CLASS_NAMES[c] for c in np.flatnonzero(train_counts == 0)]
        raise IntegrityError(f"{descriptor.name}: train split has no samples of {missing}")

    if descriptor.expected_counts is None:
        descriptor = replace(descriptor, expected_counts=counts)
    log.info("loaded %s from %s: counts %s", descriptor.name, archive, counts)
    return DatasetBundle(descriptor, archive_sha256=_sha256(archive), **splits)


def download_dataset(
    descriptor: DatasetDescriptor,
    data_dir: str | os.PathLike | None = None,
    base_url: str | None = None,
    md5: str | None = None,
) -> Path:
    """Fetch the archive into the cache directory unless already present.

    The download goes to a temporary file in the cache directory and is
    renamed into place only after the checksum matches.
    """
    target_dir = Path(data_dir) if data_dir is not None else default_data_dir()
    target = target_dir / descriptor.filename
    expected_md5 = md5 or descriptor.md5
    if target.is_file():
        if expected_md5 and _md5(target) != expected_md5:
            raise ChecksumError(f"cached {target} does not match md5 {expected_md5}")
        return target

    base_url = base_url or os.environ.get(DATA_URL_ENV)
    if base_url:
        url = base_url.rstrip("/") + "/" + descriptor.filename
    elif descriptor.url:
        url = descriptor.url
    else:
        raise ConfigError(
            f"no download URL for {descriptor.name}; pass a base URL or set {DATA_URL_ENV}"
        )
    if not url.startswith("https://"):
        raise ConfigError(f"refusing non-HTTPS download URL {url}")

    target_dir.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target_dir, suffix=".part")
    try:
        with os.fdopen(fd, "wb") as out, urllib.request.urlopen(url) as resp:
            for chunk in iter(lambda: resp.read(1 << 20), b""):
                out.write(chunk)
        if expected_md5 and _md5(Path(tmp)) != expected_md5:
            raise ChecksumError(f"download from {url} does not match md5 {expected_md5}")
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return target


# -- label encoding ---------------------------------------------------------


def one_hot(label: int | ClassLabel, num_classes: int = NUM_CLASSES) -> np.ndarray:
    code = int(label)
    if not 0 <= code < num_classes:
        raise ConfigError(f"label {code} outside [0, {num_classes - 1}]")
    v = np.zeros(num_classes)
    v[code] = 1.0
    return v


def one_hot_matrix(labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigError(f"labels outside [0, {num_classes - 1}]")
    return np.eye(num_classes)[labels]


# -- pixel preprocessing ----------------------------------------------------

NORMALIZE_MODES = ("unit_interval", "backbone_preprocess")

# Canonical per-channel statistics of the torchvision ImageNet checkpoints.
BACKBONE_PREPROCESS = {
    "resnet50": {"mean": (0.485, 0.456, 0.406), "std": (0.229, 0.224, 0.225)},
    "efficientnetv2l": {"mean": (0.5, 0.5, 0.5), "std": (0.5, 0.5, 0.5)},
}


def describe_preprocessing(mode: str, backbone: str | None = None) -> dict:
    if mode == "unit_interval":
        return {"mode": mode, "transform": "x / 255"}
    if mode == "backbone_preprocess":
        if backbone not in BACKBONE_PREPROCESS:
            raise ConfigError(f"no canonical preprocessing for backbone {backbone!r}")
        stats = BACKBONE_PREPROCESS[backbone]
        return {
            "mode": mode,
            "backbone": backbone,
            "transform": "(x / 255 - mean) / std",
            "mean": list(stats["mean"]),
            "std": list(stats["std"]),
        }
    raise ConfigError(f"unknown normalization mode {mode!r}; expected one of {NORMALIZE_MODES}")


def normalize_array(images: np.ndarray, mode: str, backbone: str | None = None) -> np.ndarray:
    """uint8 NHWC -> float64 NHWC; callers downcast for the network."""
    info = describe_preprocessing(mode, backbone)
    x = np.asarray(images, dtype=np.float64) / 255.0
    if mode == "backbone_preprocess":
        x = (x - np.asarray(info["mean"])) / np.asarray(info["std"])
    return x


def normalize_images(
    bundle: DatasetBundle, mode: str, backbone: str | None = None
) -> dict[str, np.ndarray]:
    return {s: normalize_array(bundle.split(s).images, mode, backbone) for s in SPLITS}


# -- resizing ---------------------------------------------------------------

INTERPOLATION = "bilinear"


def resize_array(images: np.ndarray, side: int, allow_downscale: bool = False) -> np.ndarray:
    """Bilinear resize of a uint8 NHWC batch, rounded back to uint8."""
    if side <= 0:
        raise ConfigError(f"target side must be positive, got {side}")
    src = images.shape[1]
    if side == src and images.shape[2] == src:
        return images
    if side < src and not allow_downscale:
        raise ConfigError(f"target side {side} is smaller than source {src}; pass allow_downscale")
    t = torch.from_numpy(np.array(images)).permute(0, 3, 1, 2).float()
    out = F.interpolate(t, size=(side, side), mode=INTERPOLATION, align_corners=False)
    out = out.round_().clamp_(0, 255).to(torch.uint8).permute(0, 2, 3, 1)
    return out.contiguous().numpy()


def resize_images(bundle: DatasetBundle, target_side: int, allow_downscale: bool = False) -> DatasetBundle:
    if target_side <= 0:
        raise ConfigError(f"target side must be positive, got {target_side}")
    if target_side == bundle.side:
        return bundle
    splits = {
        s: Split(resize_array(bundle.split(s).images, target_side, allow_downscale), bundle.split(s).labels)
        for s in SPLITS
    }
    step = ("resize", {"side": target_side, "interpolation": INTERPOLATION})
    return replace(bundle, transforms=bundle.transforms + (step,), **splits)


# -- class balance ----------------------------------------------------------


@dataclass(frozen=True)
class ClassWeights:
    weights: tuple[float, ...]

    def __getitem__(self, label: int | ClassLabel) -> float:
        return self.weights[int(label)]

    def __len__(self) -> int:
        return len(self.weights)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)

    def to_dict(self) -> dict[str, float]:
        names = CLASS_NAMES if len(self.weights) == NUM_CLASSES else [str(i) for i in range(len(self))]
        return dict(zip(names, self.weights))


def compute_class_weights(train: Split | np.ndarray, num_classes: int = NUM_CLASSES) -> ClassWeights:
    """Inverse-frequency weights ``N / (K * n_c)``, so that ``sum_c n_c * w_c == N``."""
    labels = train.labels if isinstance(train, Split) else np.asarray(train, dtype=np.int64)
    counts = np.bincount(labels, minlength=num_classes)
    if len(counts) > num_classes:
        raise ConfigError(f"labels exceed {num_classes} classes")
    if (counts == 0).any():
        empty = np.flatnonzero(counts == 0).tolist()
        raise DatasetError(f"class weight undefined for empty classes {empty}")
    n = int(counts.sum())
    return ClassWeights(tuple(n / (num_classes * int(c)) for c in counts))


# -- subsampling ------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_subsample(bundle: DatasetBundle, fraction: float, seed: int) -> DatasetBundle:
    """Keep ``round(fraction * n_c)`` samples of every class in every split.

    Classes absent from a split stay absent; a class present in a split
    but rounded down to zero samples is an error.
    """
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return bundle
    rng = np.random.default_rng(seed)
    splits = {}
    for name in SPLITS:
        split = bundle.split(name)
        keep = []
        for c, n_c in enumerate(split.class_counts(bundle.descriptor.class_count)):
            if n_c == 0:
                continue
            k = _round_half_up(fraction * n_c)
            if k < 1:
                raise DatasetError(
                    f"fraction {fraction} leaves no {CLASS_NAMES[c] if c < NUM_CLASSES else c} "
                    f"samples in {name} ({n_c} available)"
                )
            members = np.flatnonzero(split.labels == c)
            keep.append(rng.choice(members, size=k, replace=False))
        splits[name] = split.take(np.sort(np.concatenate(keep)))
    counts = tuple(len(splits[s]) for s in SPLITS)
    descriptor = replace(bundle.descriptor, expected_counts=counts, expected_total=None, split_ratio=None)
    step = ("subsample", {"fraction": fraction, "seed": seed})
    return replace(bundle, descriptor=descriptor, transforms=bundle.transforms + (step,), **splits)
