"""Per-layer linear probes on activation stores.

Each probe is an L2-regularized softmax classifier fitted with lbfgs. C is
chosen by stratified k-fold CV on macro F1 (ties go to the smaller C), then
the probe is refitted on the full training split.
"""
import base64
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold
from sklearn.preprocessing import StandardScaler

from errors import ConfigError, DegenerateLabelsError, DomainError, InsufficientSamplesError, ShapeError, StoreMismatchError
from logging_setup import get_logger
from metrics import F1Report, macro_f1

logger = get_logger("probes")

DEFAULT_C_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)


@dataclass(frozen=True)
class ProbeConfig:
    c_grid: Sequence[float] = DEFAULT_C_GRID
    folds: int = 5
    max_iterations: int = 1000
    standardize: bool = True
    seed: int = 0
    tolerance: float = 1e-4

    def __post_init__(self):
        grid = list(self.c_grid)
        if not grid:
            raise ConfigError("c_grid must not be empty")
        if any(c <= 0 for c in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError(f"c_grid must be positive and strictly increasing: {grid}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        object.__setattr__(self, "c_grid", tuple(float(c) for c in grid))

    @classmethod
    def from_dict(cls, data: dict) -> "ProbeConfig":
        return cls(**dict(data or {}))

    def to_dict(self) -> dict:
        return {
            "c_grid": list(self.c_grid),
            "folds": self.folds,
            "max_iterations": self.max_iterations,
            "standardize": self.standardize,
            "seed": self.seed,
            "tolerance": self.tolerance,
        }


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _decode(text: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f4").reshape(shape).astype(np.float64)


@dataclass
class LayerProbe:
    layer_index: int
    weights: np.ndarray  # C x D
    bias: np.ndarray  # C
    chosen_c: float
    feature_mean: Optional[np.ndarray] = None
    feature_std: Optional[np.ndarray] = None
    converged: bool = True
    n_iter: int = 0
    cv_scores: Dict[float, float] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def transform(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.dim:
            raise ShapeError(f"probe expects N x {self.dim} features, got {features.shape}")
        if self.feature_mean is None:
            return features
        return (features - self.feature_mean) / self.feature_std

    def decision(self, features: np.ndarray) -> np.ndarray:
        return self.transform(features) @ self.weights.T + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        """1-based class predictions."""
        return np.argmax(self.decision(features), axis=1) + 1

    def to_dict(self) -> dict:
        data = {
            "layer": self.layer_index,
            "n_classes": self.n_classes,
            "dim": self.dim,
            "chosen_c": self.chosen_c,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "cv_scores": {repr(c): s for c, s in self.cv_scores.items()},
            "weights": _encode(self.weights),
            "bias": _encode(self.bias),
            "feature_mean": None,
            "feature_std": None,
        }
        if self.feature_mean is not None:
            data["feature_mean"] = _encode(self.feature_mean)
            data["feature_std"] = _encode(self.feature_std)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "LayerProbe":
        c, d = data["n_classes"], data["dim"]
        return cls(
            layer_index=data["layer"],
            weights=_decode(data["weights"], (c, d)),
            bias=_decode(data["bias"], (c,)),
            chosen_c=data["chosen_c"],
            feature_mean=_decode(data["feature_mean"], (d,)) if data["feature_mean"] else None,
            feature_std=_decode(data["feature_std"], (d,)) if data["feature_std"] else None,
            converged=data["converged"],
            n_iter=data["n_iter"],
            cv_scores={float(c): s for c, s in data["cv_scores"].items()},
        )


def _check_training_set(features: np.ndarray, labels: np.ndarray, n_classes: int, folds: int) -> None:
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ShapeError(f"features {features.shape} do not match {labels.shape[0]} labels")
    if not np.isfinite(features).all():
        raise DomainError("features contain non-finite values")
    counts = np.bincount(labels, minlength=n_classes + 1)[1:]
    if labels.min(initial=1) < 1 or len(counts) > n_classes:
        raise DomainError(f"labels must lie in 1..{n_classes}")
    absent = [c + 1 for c, n in enumerate(counts) if n == 0]
    if absent or n_classes < 2:
        raise DegenerateLabelsError(f"classes {absent} absent from training labels (C={n_classes})")
    if counts.min() < folds:
        raise InsufficientSamplesError(
            f"smallest class has {counts.min()} samples, stratified {folds}-fold CV needs at least {folds}"
        )


def _fit(features, labels, c: float, cfg: ProbeConfig):
    scaler = StandardScaler().fit(features) if cfg.standardize else None
    x = scaler.transform(features) if scaler is not None else features
    # two classes fit one logit w; the symmetric rows (-w/2, w/2) carry half its squared norm
    effective_c = 2 * c if np.unique(labels).size == 2 else c
    clf = LogisticRegression(C=effective_c, solver="lbfgs", max_iter=cfg.max_iterations, tol=cfg.tolerance)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=ConvergenceWarning)
        clf.fit(x, labels)
    return scaler, clf


def _to_probe(layer: int, scaler, clf, c: float, cfg: ProbeConfig, cv_scores) -> LayerProbe:
    coef, intercept = clf.coef_.astype(np.float64), clf.intercept_.astype(np.float64)
    if coef.shape[0] == 1:
        # binary sklearn fit: one logit for class 2; symmetric softmax form
        coef = np.vstack([-coef[0] / 2, coef[0] / 2])
        intercept = np.array([-intercept[0] / 2, intercept[0] / 2])
    n_iter = int(np.max(clf.n_iter_))
    return LayerProbe(
        layer_index=layer,
        weights=coef,
        bias=intercept,
        chosen_c=c,
        feature_mean=scaler.mean_.copy() if scaler is not None else None,
        feature_std=scaler.scale_.copy() if scaler is not None else None,
        converged=n_iter < cfg.max_iterations,
        n_iter=n_iter,
        cv_scores=cv_scores,
    )


def train_probe(features, labels, config: ProbeConfig = ProbeConfig(), n_classes: Optional[int] = None, layer_index: int = 0) -> LayerProbe:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(n_classes or labels.max(initial=0))
    _check_training_set(features, labels, n_classes, config.folds)

    folds = list(StratifiedKFold(n_splits=config.folds, shuffle=True, random_state=config.seed).split(features, labels))
    cv_scores, best_c, best_score = {}, None, -1.0
    for c in config.c_grid:
        scores = []
        for train_idx, val_idx in folds:
            scaler, clf = _fit(features[train_idx], labels[train_idx], c, config)
            x_val = scaler.transform(features[val_idx]) if scaler is not None else features[val_idx]
            scores.append(macro_f1(labels[val_idx], clf.predict(x_val), n_classes).macro_f1)
        cv_scores[c] = float(np.mean(scores))
        if cv_scores[c] > best_score:
            best_c, best_score = c, cv_scores[c]

    scaler, clf = _fit(features, labels, best_c, config)
    probe = _to_probe(layer_index, scaler, clf, best_c, config, cv_scores)
    if not probe.converged:
        logger.warning(f"Layer {layer_index} probe did not converge in {config.max_iterations} iterations (C={best_c})")
    return probe


@dataclass
class ProbeEvaluation:
    report: F1Report
    predictions: np.ndarray

    @property
    def macro_f1(self) -> float:
        return self.report.macro_f1


def evaluate_probe(probe: LayerProbe, features, labels) -> ProbeEvaluation:
    predictions = probe.predict(features)
    return ProbeEvaluation(report=macro_f1(labels, predictions, probe.n_classes), predictions=predictions)


def probe_objective(probe: LayerProbe, features, labels) -> float:
    """Summed softmax cross-entropy plus ||W||^2 / (2C), on the probe's own feature scaling."""
    labels = np.asarray(labels, dtype=np.int64)
    logits = probe.decision(features)
    nll = np.sum(logsumexp(logits, axis=1) - logits[np.arange(len(labels)), labels - 1])
    return float(nll + np.sum(probe.weights ** 2) / (2 * probe.chosen_c))


@dataclass
class ProbeCurve:
    scores: List[float]
    chosen_c: List[float]
    converged: List[bool]
    test_ids: List[str] = field(default_factory=list)
    predictions: Dict[int, List[int]] = field(default_factory=dict)

    @property
    def best_layer(self) -> int:
        return int(np.argmax(self.scores))

    @property
    def best_score(self) -> float:
        return self.scores[self.best_layer]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "layer": range(len(self.scores)),
            "macro_f1": self.scores,
            "chosen_c": self.chosen_c,
            "converged": self.converged,
        })

    def to_dict(self) -> dict:
        return {
            "scores": list(self.scores),
            "chosen_c": list(self.chosen_c),
            "converged": list(self.converged),
            "best_layer": self.best_layer,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProbeCurve":
        return cls(scores=list(data["scores"]), chosen_c=list(data["chosen_c"]), converged=list(data["converged"]))


def train_layerwise(
    train_store,
    test_store,
    train_labels: Dict[str, int],
    test_labels: Dict[str, int],
    n_classes: int,
    config: ProbeConfig = ProbeConfig(),
    out_dir: Optional[Path] = None,
) -> ProbeCurve:
    """Independent probe per layer 0..L; persists layer<k>.json and curve.csv when out_dir is set."""
    if train_store.key.split == test_store.key.split:
        raise StoreMismatchError(f"train and test stores share split {train_store.key.split!r}")
    if train_store.key.lineage() != test_store.key.lineage():
        raise StoreMismatchError("train and test stores come from different extraction settings")
    if train_store.shape != test_store.shape:
        raise StoreMismatchError(f"store shapes differ: {train_store.shape} vs {test_store.shape}")
    if train_store.shape is None:
        raise StoreMismatchError("activation stores are empty")

    train_ids = [sid for sid in train_store.sample_ids if sid in train_labels]
    test_ids = [sid for sid in test_store.sample_ids if sid in test_labels]
    x_train, x_test = train_store.features(train_ids), test_store.features(test_ids)
    y_train = np.array([train_labels[sid] for sid in train_ids], dtype=np.int64)
    y_test = np.array([test_labels[sid] for sid in test_ids], dtype=np.int64)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    curve = ProbeCurve(scores=[], chosen_c=[], converged=[], test_ids=test_ids)
    for layer in range(train_store.shape[0]):
        probe = train_probe(x_train[:, layer], y_train, config, n_classes=n_classes, layer_index=layer)
        result = evaluate_probe(probe, x_test[:, layer], y_test)
        curve.scores.append(result.macro_f1)
        curve.chosen_c.append(probe.chosen_c)
        curve.converged.append(probe.converged)
        curve.predictions[layer] = result.predictions.tolist()
        logger.info(f"Layer {layer}: macro F1 {result.macro_f1:.3f} (C={probe.chosen_c:g}, converged={probe.converged})")
        if out_dir is not None:
            with open(out_dir / f"layer{layer}.json", "w", encoding="utf-8") as f:
                json.dump(probe.to_dict(), f, indent=2, sort_keys=True)

    if out_dir is not None:
        curve.to_frame().to_csv(out_dir / "curve.csv", index=False)
    logger.info(f"Best layer {curve.best_layer} with macro F1 {curve.best_score:.3f}")
    return curve
