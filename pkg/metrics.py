"""Evaluation mathematics: macro F1, unbiased pass@K, prompt-variant spread.

Labels are 1-based (1..C). A prediction of FAILURE (0) is an unparseable answer:
it is a false negative for the true class and a false positive for no class.
"""
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from errors import DomainError, ShapeError

FAILURE = 0

METRIC_COLUMNS = ["dataset", "model", "method", "modality", "style", "shots", "seed", "metric", "value", "cell_key"]


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def from_labels(cls, y_true, y_pred, n_classes: int) -> "ConfusionCounts":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        if y_true.shape != y_pred.shape or y_true.ndim != 1:
            raise ShapeError(f"y_true {y_true.shape} and y_pred {y_pred.shape} must be equal-length vectors")
        if y_true.size and (y_true.min() < 1 or y_true.max() > n_classes):
            raise DomainError(f"true labels must lie in 1..{n_classes}")
        if y_pred.size and (y_pred.min() < FAILURE or y_pred.max() > n_classes):
            raise DomainError(f"predictions must lie in 1..{n_classes} or be FAILURE")

        hit = y_true == y_pred
        bins = n_classes + 1
        tp = np.bincount(y_true[hit], minlength=bins)[1:]
        fn = np.bincount(y_true[~hit], minlength=bins)[1:]
        fp = np.bincount(y_pred[~hit], minlength=bins)[1:]
        return cls(tp=tp, fp=fp, fn=fn)

    @property
    def n_classes(self) -> int:
        return len(self.tp)

    def to_dict(self) -> Dict[str, List[int]]:
        return {"tp": self.tp.tolist(), "fp": self.fp.tolist(), "fn": self.fn.tolist()}


@dataclass
class F1Report:
    macro_f1: float
    precision: List[float]
    recall: List[float]
    f1: List[float]
    confusion: ConfusionCounts


def _ratio(num: int, den: int) -> float:
    # 0/0 -> 0
    return num / den if den else 0.0


def macro_f1(y_true, y_pred, n_classes: int) -> F1Report:
    """Macro F1 over all C classes, absent classes included (0/0 -> 0)."""
    counts = ConfusionCounts.from_labels(y_true, y_pred, n_classes)
    precision, recall, f1 = [], [], []
    for c in range(n_classes):
        tp, fp, fn = int(counts.tp[c]), int(counts.fp[c]), int(counts.fn[c])
        p = _ratio(tp, tp + fp)
        r = _ratio(tp, tp + fn)
        precision.append(p)
        recall.append(r)
        f1.append(2 * p * r / (p + r) if (p + r) else 0.0)
    return F1Report(
        macro_f1=sum(f1) / n_classes,
        precision=precision,
        recall=recall,
        f1=f1,
        confusion=counts,
    )


# --- pass@K -----------------------------------------------------------------


def _pass_at_k_exact(c: int, n: int, k: int) -> Fraction:
    if not 0 <= c <= n:
        raise DomainError(f"correct count c={c} outside 0..{n}")
    if k < 1 or k > n:
        raise DomainError(f"K={k} outside 1..n={n}")
    if c == 0:
        return Fraction(0)
    if n - c < k:
        return Fraction(1)
    return 1 - Fraction(math.comb(n - c, k), math.comb(n, k))


def pass_at_k(c: int, n: int, k: int) -> float:
    """Unbiased pass@K for one item: 1 - C(n-c, K) / C(n, K), evaluated exactly."""
    return float(_pass_at_k_exact(int(c), int(n), int(k)))


def dataset_pass_at_k(counts: Sequence[int], n: int, k: int) -> float:
    """Mean per-item pass@K over a dataset (all items share n)."""
    if len(counts) == 0:
        raise DomainError("dataset_pass_at_k needs at least one item")
    total = sum((_pass_at_k_exact(int(c), int(n), int(k)) for c in counts), Fraction(0))
    return float(total / len(counts))


@dataclass
class PassAtKTable:
    n: int
    counts: List[int]
    ks: List[int]
    estimates: Dict[int, float] = field(default_factory=dict)

    @property
    def delta(self) -> float:
        """P@max(K) - P@1."""
        return self.estimates[max(self.ks)] - self.estimates[min(self.ks)]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "counts": list(self.counts),
            "ks": list(self.ks),
            "estimates": {str(k): v for k, v in self.estimates.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PassAtKTable":
        return cls(
            n=data["n"],
            counts=list(data["counts"]),
            ks=list(data["ks"]),
            estimates={int(k): v for k, v in data["estimates"].items()},
        )


def pass_at_k_table(counts: Sequence[int], n: int, ks: Sequence[int] = (1,)) -> PassAtKTable:
    ks = sorted(set(int(k) for k in ks) | {1})
    return PassAtKTable(
        n=n,
        counts=[int(c) for c in counts],
        ks=ks,
        estimates={k: dataset_pass_at_k(counts, n, k) for k in ks},
    )


# --- prompt-variant spread ----------------------------------------------------


@dataclass
class SpreadReport:
    f1s: List[float]
    min: float
    max: float
    mean: float
    median: float
    delta: float

    def to_dict(self) -> dict:
        return {
            "f1s": list(self.f1s),
            "min": self.min,
            "max": self.max,
            "mean": self.mean,
            "median": self.median,
            "delta": self.delta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SpreadReport":
        return cls(**data)


def variant_spread(f1s: Sequence[float]) -> SpreadReport:
    """Order statistics of per-variant macro F1; delta = max - min."""
    if len(f1s) == 0:
        raise DomainError("variant_spread needs at least one score")
    ordered = sorted(float(f) for f in f1s)
    mid = len(ordered) // 2
    median = ordered[mid] if len(ordered) % 2 else (ordered[mid - 1] + ordered[mid]) / 2
    return SpreadReport(
        f1s=[float(f) for f in f1s],
        min=ordered[0],
        max=ordered[-1],
        # fsum is exactly rounded, hence independent of order
        mean=math.fsum(ordered) / len(ordered),
        median=median,
        delta=ordered[-1] - ordered[0],
    )


# --- metric rows ----------------------------------------------------------------


def write_metric_rows(rows: List[dict], path: Path) -> Path:
    """Write metric rows as CSV with the fixed column order."""
    frame = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path
