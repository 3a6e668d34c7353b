"""Label-only heuristic floors and the random-weight probing control."""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from config import config
from errors import ConfigError, DomainError
from logging_setup import get_logger
from metrics import macro_f1
from model_bridge import ActivationStore, ExtractionStyle, extract_dataset, make_random_control, store_key_for
from probes import train_layerwise
from represent import RenderConfig, SerializationConfig

logger = get_logger("baselines")

HEURISTICS = ("majority", "prior", "uniform")
REFERENCE_COLUMNS = ["model", "method", "dataset", "value"]


def _check_train(train_labels) -> np.ndarray:
    labels = np.asarray(train_labels, dtype=np.int64)
    if labels.size == 0:
        raise DomainError("heuristic baselines need at least one training label")
    return labels


def majority_predict(train_labels, n_test: int) -> np.ndarray:
    """Modal training class for every test item; ties go to the smallest class."""
    labels = _check_train(train_labels)
    return np.full(n_test, int(np.argmax(np.bincount(labels))), dtype=np.int64)


def prior_predict(train_labels, n_test: int, seed: int) -> np.ndarray:
    """I.i.d. draws from the empirical training class distribution."""
    labels = _check_train(train_labels)
    counts = np.bincount(labels)
    classes = np.flatnonzero(counts)
    rng = np.random.default_rng(seed)
    return rng.choice(classes, size=n_test, p=counts[classes] / labels.size).astype(np.int64)


def uniform_predict(n_classes: int, n_test: int, seed: int) -> np.ndarray:
    if n_classes < 2:
        raise DomainError(f"uniform baseline needs C >= 2, got {n_classes}")
    rng = np.random.default_rng(seed)
    return rng.integers(1, n_classes + 1, size=n_test, dtype=np.int64)


@dataclass
class HeuristicScore:
    kind: str
    mean: float
    sd: float
    scores: List[float]
    seeds: List[int]
    predictions: Dict[int, List[int]]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mean": self.mean, "sd": self.sd, "scores": self.scores, "seeds": self.seeds}


def heuristic_predict(kind: str, train_labels, n_test: int, n_classes: int, seed: int) -> np.ndarray:
    if kind == "majority":
        return majority_predict(train_labels, n_test)
    if kind == "prior":
        return prior_predict(train_labels, n_test, seed)
    if kind == "uniform":
        return uniform_predict(n_classes, n_test, seed)
    raise ConfigError(f"unknown heuristic {kind!r}; expected one of {HEURISTICS}")


def evaluate_heuristic(kind: str, train_labels, test_labels, n_classes: int, seeds: Optional[List[int]] = None) -> HeuristicScore:
    """Macro F1 mean and sd over seeds; majority is deterministic and uses one seed."""
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if seeds is None:
        seeds = list(range(config.HEURISTIC_SEEDS))
    if kind == "majority":
        seeds = seeds[:1]
    scores, predictions = [], {}
    for seed in seeds:
        pred = heuristic_predict(kind, train_labels, len(test_labels), n_classes, seed)
        predictions[seed] = pred.tolist()
        scores.append(macro_f1(test_labels, pred, n_classes).macro_f1)
    mean = float(np.mean(scores))
    sd = float(np.std(scores, ddof=1)) if len(scores) > 1 else 0.0
    logger.info(f"{kind} baseline: macro F1 {mean:.3f} +/- {sd:.3f} over {len(seeds)} seed(s)")
    return HeuristicScore(kind=kind, mean=mean, sd=sd, scores=scores, seeds=list(seeds), predictions=predictions)


def random_probe_run(
    reference,
    train_ds,
    test_ds,
    modality,
    template,
    probe_config,
    seed: int,
    root: Path,
    serial_config=None,
    render_config=None,
    style=None,
    shots=None,
    out_dir: Optional[Path] = None,
    factory=None,
    **stub_kwargs,
):
    """Extract and probe on a freshly initialized copy of the reference architecture."""
    serial_config = serial_config or SerializationConfig()
    render_config = render_config or RenderConfig()
    style = style or ExtractionStyle.PREFILL
    control = make_random_control(reference, seed, factory, **stub_kwargs)
    try:
        stores = {}
        for ds in (train_ds, test_ds):
            store = ActivationStore(root, store_key_for(control, ds, modality, template, style, serial_config, render_config))
            stores[ds.split] = extract_dataset(ds, modality, template, control, store, serial_config, render_config, style, shots)
    finally:
        control.close()
    curve = train_layerwise(
        stores["train"], stores["test"], train_ds.labels_by_id(), test_ds.labels_by_id(),
        n_classes=train_ds.n_classes, config=probe_config, out_dir=out_dir,
    )
    logger.info(f"random_probe {control.name} on {train_ds.id}/{modality}: best layer {curve.best_layer} F1 {curve.best_score:.3f}")
    return curve


def load_reference_rows(path) -> pd.DataFrame:
    """Published scores of external baselines (`model,method,dataset,value`), tagged source=imported."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Reference CSV not found: {path}")
    frame = pd.read_csv(path)
    missing = set(REFERENCE_COLUMNS) - set(frame.columns)
    if missing:
        raise ConfigError(f"Reference CSV {path} lacks columns: {sorted(missing)}")
    frame = frame[REFERENCE_COLUMNS].copy()
    frame["source"] = "imported"
    return frame
