"""Classification metrics for 7-class score matrices.

Scores are passed as an (N, K) array of per-class probabilities together
with an (N,) array of true class codes. Precision and recall are binary
quantities, so a multi-class number needs a reduction; two are provided:

``threshold_micro``
    every (sample, class) pair is a binary decision, positive iff the
    score reaches ``tau``; counts are pooled over all pairs.
``argmax_macro``
    one-vs-rest counts per class from argmax predictions, metrics
    averaged over classes.
"""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import CLASS_NAMES
from .errors import MetricsError

MODES = ("threshold_micro", "argmax_macro")
REPORT_COLUMNS = ("loss", "acc", "precision", "auc", "recall")
REPORT_HEADER = ("Loss", "ACC", "Precision", "AUC", "Recall")
DEFAULT_TAU = 0.5


@dataclass(frozen=True)
class ScoredSample:
    scores: np.ndarray
    true_label: int

    def __post_init__(self):
        if abs(float(np.sum(self.scores)) - 1.0) > 1e-6:
            raise MetricsError("scores must sum to 1")


def stack_samples(samples: Sequence[ScoredSample]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.stack([np.asarray(s.scores, dtype=np.float64) for s in samples])
    labels = np.asarray([int(s.true_label) for s in samples], dtype=np.int64)
    return scores, labels


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or len(scores) == 0:
        raise MetricsError(f"expected a non-empty (N, K) score matrix, got shape {scores.shape}")
    if labels.shape != (len(scores),):
        raise MetricsError(f"labels shape {labels.shape} does not match {len(scores)} samples")
    if labels.min() < 0 or labels.max() >= scores.shape[1]:
        raise MetricsError("labels outside the class range")
    return scores, labels


# -- confusion matrix / accuracy -------------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_dict(self) -> dict:
        return {"classes": list(CLASS_NAMES[: len(self.counts)]), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionMatrix":
        return cls(np.asarray(d["counts"], dtype=np.int64))

    def to_csv(self) -> str:
        names = CLASS_NAMES[: len(self.counts)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true/predicted", *names])
        for name, row in zip(names, self.counts):
            w.writerow([name, *row.tolist()])
        return buf.getvalue()


def confusion_matrix(scores, labels, num_classes: int | None = None) -> ConfusionMatrix:
    """Count each sample at (true, argmax); ties go to the lowest class code."""
    scores, labels = _check(scores, labels)
    k = num_classes or scores.shape[1]
    pred = scores.argmax(axis=1)  # numpy argmax returns the first maximum
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, pred), 1)
    return ConfusionMatrix(counts)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise MetricsError("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


# -- binary counts ----------------------------------------------------------


@dataclass(frozen=True)
class BinaryCounts:
    TP: int
    FP: int
    TN: int
    FN: int

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.TN + self.FN


@dataclass(frozen=True)
class Ratio:
    """A metric value plus whether its denominator was zero."""

    value: float
    undefined: bool = False

    def __float__(self) -> float:
        return self.value


def precision(c: BinaryCounts) -> Ratio:
    d = c.TP + c.FP
    return Ratio(0.0, True) if d == 0 else Ratio(c.TP / d)


def recall(c: BinaryCounts) -> Ratio:
    d = c.TP + c.FN
    return Ratio(0.0, True) if d == 0 else Ratio(c.TP / d)


def threshold_counts(scores, labels, tau: float = DEFAULT_TAU) -> BinaryCounts:
    """Pooled counts over all N*K (sample, class) decisions, positive iff score >= tau."""
    if not 0 < tau < 1:
        raise MetricsError(f"tau must lie in (0, 1), got {tau}")
    scores, labels = _check(scores, labels)
    decided = scores >= tau
    actual = np.zeros_like(decided)
    actual[np.arange(len(labels)), labels] = True
    return BinaryCounts(
        TP=int((decided & actual).sum()),
        FP=int((decided & ~actual).sum()),
        TN=int((~decided & ~actual).sum()),
        FN=int((~decided & actual).sum()),
    )


def per_class_counts(scores, labels) -> list[BinaryCounts]:
    """One-vs-rest counts per class from argmax decisions."""
    cm = confusion_matrix(scores, labels).counts
    n = cm.sum()
    out = []
    for c in range(len(cm)):
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum() - tp)
        fn = int(cm[c, :].sum() - tp)
        out.append(BinaryCounts(tp, fp, int(n - tp - fp - fn), fn))
    return out


def binary_counts(scores, labels, mode: str = "threshold_micro", tau: float = DEFAULT_TAU):
    if mode == "threshold_micro":
        return threshold_counts(scores, labels, tau)
    if mode in ("argmax_per_class", "argmax_macro"):
        return per_class_counts(scores, labels)
    raise MetricsError(f"unknown counting mode {mode!r}")


# -- AUC ----------------------------------------------------------------------


def average_ranks(values: np.ndarray) -> np.ndarray:
    """Ascending 1-based ranks; tied values share the mean of their ranks."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    # start index of every run of equal values
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], len(values)]
    # run [s, e) occupies ranks s+1 .. e, mean (s + 1 + e) / 2
    run_rank = (starts + 1 + ends) / 2.0
    ranks = np.empty(len(values))
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def auc_rank(positives, negatives) -> float:
    """Rank-sum AUC ``(S_p - n_p(n_p+1)/2) / (n_p n_n)``."""
    pos = np.asarray(positives, dtype=np.float64).ravel()
    neg = np.asarray(negatives, dtype=np.float64).ravel()
    n_p, n_n = len(pos), len(neg)
    if n_p == 0 or n_n == 0:
        raise MetricsError("AUC needs at least one positive and one negative score")
    ranks = average_ranks(np.concatenate([pos, neg]))
    s_p = ranks[:n_p].sum()
    return float((s_p - n_p * (n_p + 1) / 2) / (n_p * n_n))


def one_vs_rest_auc(scores, labels) -> tuple[dict[int, float], list[int]]:
    """Per-class AUCs and the classes skipped for lacking positives or negatives."""
    scores, labels = _check(scores, labels)
    per_class, excluded = {}, []
    for c in range(scores.shape[1]):
        is_pos = labels == c
        if is_pos.all() or not is_pos.any():
            excluded.append(c)
            continue
        per_class[c] = auc_rank(scores[is_pos, c], scores[~is_pos, c])
    return per_class, excluded


def multiclass_auc(scores, labels) -> float:
    per_class, excluded = one_vs_rest_auc(scores, labels)
    if excluded:
        warnings.warn(f"AUC excludes classes without positives or negatives: {excluded}", stacklevel=2)
    if not per_class:
        raise MetricsError("no class has both positives and negatives")
    return float(np.mean(list(per_class.values())))


# -- report -----------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    loss: float
    accuracy: float
    precision: float
    auc: float
    recall: float
    aggregation_mode: str
    undefined: tuple[str, ...] = ()
    auc_excluded_classes: tuple[int, ...] = ()

    def row(self) -> tuple[float, float, float, float, float]:
        return (self.loss, self.accuracy, self.precision, self.auc, self.recall)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["undefined"] = list(self.undefined)
        d["auc_excluded_classes"] = list(self.auc_excluded_classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["undefined"] = tuple(d.get("undefined", ()))
        d["auc_excluded_classes"] = tuple(d.get("auc_excluded_classes", ()))
        return cls(**d)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerow([f"{v:.4f}" for v in self.row()])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def full_report(scores, labels, loss: float, mode: str = "both", tau: float = DEFAULT_TAU):
    """Five-column result row(s). ``mode="both"`` returns a dict keyed by reduction."""
    if mode == "both":
        return {m: full_report(scores, labels, loss, m, tau) for m in MODES}
    if mode not in MODES:
        raise MetricsError(f"unknown aggregation mode {mode!r}")
    scores, labels = _check(scores, labels)
    if not loss >= 0:
        raise MetricsError(f"loss must be non-negative, got {loss}")
    acc = accuracy(confusion_matrix(scores, labels))
    undefined: list[str] = []
    if mode == "threshold_micro":
        counts = threshold_counts(scores, labels, tau)
        p, r = precision(counts), recall(counts)
        prec, rec = p.value, r.value
        undefined += [name for name, v in (("precision", p), ("recall", r)) if v.undefined]
    else:
        ps, rs = [], []
        for c, counts in enumerate(per_class_counts(scores, labels)):
            p, r = precision(counts), recall(counts)
            ps.append(p.value)
            rs.append(r.value)
            if p.undefined:
                undefined.append(f"precision[{c}]")
            if r.undefined:
                undefined.append(f"recall[{c}]")
        prec, rec = float(np.mean(ps)), float(np.mean(rs))
    per_class, excluded = one_vs_rest_auc(scores, labels)
    if excluded:
        warnings.warn(f"AUC excludes classes without positives or negatives: {excluded}", stacklevel=2)
    auc = float(np.mean(list(per_class.values()))) if per_class else 0.0
    if not per_class:
        undefined.append("auc")
    return MetricsReport(float(loss), acc, prec, auc, rec, mode, tuple(undefined), tuple(excluded))
