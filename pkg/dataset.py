"""Canonical on-disk time-series store.

Layout per dataset::

    <root>/<id>/manifest.json
    <root>/<id>/{train,test}.f32          little-endian float32, row-major N x V x T
    <root>/<id>/{train,test}.labels.csv   sample_id,label (1-based)
"""
import hashlib
import json
import os
import string
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from config import config
from errors import (
    CorruptStoreError,
    IngestLabelError,
    IngestShapeError,
    IngestSplitError,
    IngestValueError,
    InsufficientSamplesError,
    NotFoundError,
)
from logging_setup import get_logger

logger = get_logger("dataset")

SPLITS = ("train", "test")
RENDER_STYLES = ("line", "spectrogram")


class NanPolicy(str, Enum):
    REJECT = "reject"
    FORWARD_FILL = "forward-fill"
    ZERO_FILL = "zero-fill"


def option_letters(n_classes: int) -> List[str]:
    if n_classes > len(string.ascii_uppercase):
        raise IngestLabelError(f"At most 26 classes are supported, got {n_classes}")
    return list(string.ascii_uppercase[:n_classes])


@dataclass
class TimeSeriesDataset:
    id: str
    X: np.ndarray  # N x V x T
    y: np.ndarray  # N, 1-based
    class_names: List[str]
    split: str
    channel_names: List[str]
    sample_ids: List[str]
    render_style: str = "line"
    sample_rate: Optional[float] = None
    normalize: bool = False

    def __post_init__(self):
        if self.X.ndim != 3:
            raise IngestShapeError(f"X must be rank 3 (N x V x T), got shape {self.X.shape}")
        n, v, _ = self.X.shape
        if len(self.y) != n or len(self.sample_ids) != n:
            raise IngestShapeError(f"{len(self.y)} labels / {len(self.sample_ids)} ids for {n} sequences")
        if len(self.channel_names) != v:
            raise IngestShapeError(f"{len(self.channel_names)} channel names for V={v}")
        if n and (self.y.min() < 1 or self.y.max() > self.n_classes):
            raise IngestLabelError(f"labels must lie in 1..{self.n_classes}")

    @property
    def option_letters(self) -> List[str]:
        return option_letters(len(self.class_names))

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def shape(self):
        return tuple(self.X.shape)

    def __len__(self):
        return self.X.shape[0]

    def labels_by_id(self) -> Dict[str, int]:
        return dict(zip(self.sample_ids, (int(v) for v in self.y)))


@dataclass
class DatasetMeta:
    """Manifest fields supplied at ingestion time."""
    id: str
    class_names: List[str]
    length: int
    channel_names: Optional[List[str]] = None
    render_style: str = "line"
    sample_rate: Optional[float] = None
    nan_policy: NanPolicy = NanPolicy.REJECT
    normalize: bool = False
    provenance: str = ""


@dataclass
class DatasetManifest:
    id: str
    shapes: Dict[str, List[int]]
    checksums: Dict[str, str]
    class_names: List[str]
    option_letters: List[str]
    channel_names: List[str]
    render_style: str
    sample_rate: Optional[float]
    nan_policy: str
    normalize: bool
    padded: Dict[str, int] = field(default_factory=dict)
    truncated: Dict[str, int] = field(default_factory=dict)
    provenance: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        return cls(**data)


@dataclass
class LabeledSequence:
    sample_id: str
    split: str
    label: str
    values: np.ndarray  # V x T' (T' may differ from the declared T)


# --- helpers ------------------------------------------------------------------


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def _labels_csv(sample_ids: Sequence[str], y: np.ndarray) -> bytes:
    frame = pd.DataFrame({"sample_id": list(sample_ids), "label": y.astype(int)})
    return frame.to_csv(index=False, lineterminator="\n").encode("utf-8")


def _fit_length(values: np.ndarray, length: int):
    """Pad-right with the last observed value, or truncate, to `length` steps."""
    t = values.shape[1]
    if t == length:
        return values, 0, 0
    if t > length:
        return values[:, :length], 0, 1
    if t == 0:
        raise IngestShapeError("Empty sequence cannot be padded")
    pad = np.repeat(values[:, -1:], length - t, axis=1)
    return np.concatenate([values, pad], axis=1), 1, 0


def _apply_nan_policy(values: np.ndarray, policy: NanPolicy, sample_id: str) -> np.ndarray:
    if np.isinf(values).any():
        raise IngestValueError(f"Sample {sample_id} contains infinite values")
    if not np.isnan(values).any():
        return values
    if policy == NanPolicy.REJECT:
        raise IngestValueError(f"Sample {sample_id} contains NaN values (nan_policy=reject)")
    if policy == NanPolicy.ZERO_FILL:
        return np.nan_to_num(values, nan=0.0)
    # forward-fill along time, then back-fill leading gaps
    if np.isnan(values).all(axis=1).any():
        raise IngestValueError(f"Sample {sample_id} has a channel without finite values")
    filled = pd.DataFrame(values.T).ffill().bfill()
    return filled.to_numpy().T


# --- operations ---------------------------------------------------------------


def read_source_table(path) -> List[LabeledSequence]:
    """Read the long CSV layout `sample_id,split,label,channel,t,value`."""
    frame = pd.read_csv(path, dtype={"sample_id": str, "split": str, "label": str, "channel": str})
    missing = {"sample_id", "split", "label", "channel", "t", "value"} - set(frame.columns)
    if missing:
        raise IngestShapeError(f"Source table {path} lacks columns: {sorted(missing)}")

    records = []
    channel_order = list(dict.fromkeys(frame["channel"]))
    for (sample_id, split), group in frame.groupby(["sample_id", "split"], sort=False):
        labels = group["label"].unique()
        if len(labels) != 1:
            raise IngestLabelError(f"Sample {sample_id} carries several labels: {list(labels)}")
        wide = group.pivot(index="channel", columns="t", values="value")
        wide = wide.reindex(index=[c for c in channel_order if c in wide.index])
        records.append(LabeledSequence(sample_id, split, labels[0], wide.to_numpy(dtype=np.float64)))
    logger.info(f"Read {len(records)} sequences from {path}")
    return records


def ingest(records: Sequence[LabeledSequence], meta: DatasetMeta, root: Optional[Path] = None) -> Dict[str, TimeSeriesDataset]:
    """Validate, normalize shapes, and write both splits to the canonical store."""
    root = Path(root or config.DATA_DIR)
    policy = NanPolicy(meta.nan_policy)
    if meta.render_style not in RENDER_STYLES:
        raise IngestShapeError(f"Unknown render_style {meta.render_style!r}")
    if meta.length < 1:
        raise IngestShapeError(f"Declared length must be positive, got {meta.length}")
    letters = option_letters(len(meta.class_names))
    class_index = {name: i + 1 for i, name in enumerate(meta.class_names)}

    channels = None
    per_split = {split: {"ids": [], "X": [], "y": [], "padded": 0, "truncated": 0} for split in SPLITS}
    for rec in records:
        if rec.split not in per_split:
            raise IngestShapeError(f"Sample {rec.sample_id} has unknown split {rec.split!r}")
        values = np.atleast_2d(np.asarray(rec.values, dtype=np.float64))
        if channels is None:
            channels = values.shape[0]
        if values.shape[0] != channels:
            raise IngestShapeError(f"Sample {rec.sample_id} has {values.shape[0]} channels, expected {channels}")
        label = str(rec.label)
        if label not in class_index:
            raise IngestLabelError(f"Sample {rec.sample_id} has unknown label {label!r}")
        values = _apply_nan_policy(values, policy, rec.sample_id)
        values, padded, truncated = _fit_length(values, meta.length)
        with np.errstate(over="ignore"):
            values = values.astype("<f4")
        if not np.isfinite(values).all():
            raise IngestValueError(f"Sample {rec.sample_id} has values outside the float32 range")
        bucket = per_split[rec.split]
        bucket["ids"].append(str(rec.sample_id))
        bucket["X"].append(values)
        bucket["y"].append(class_index[label])
        bucket["padded"] += padded
        bucket["truncated"] += truncated

    if channels is None:
        raise IngestShapeError("No sequences to ingest")
    channel_names = list(meta.channel_names or [f"ch{i}" for i in range(channels)])
    if len(channel_names) != channels:
        raise IngestShapeError(f"{len(channel_names)} channel names declared for V={channels}")

    overlap = set(per_split["train"]["ids"]) & set(per_split["test"]["ids"])
    if overlap:
        raise IngestSplitError(f"Train and test share sample ids: {sorted(overlap)[:5]}")
    for split in SPLITS:
        ids = per_split[split]["ids"]
        if len(set(ids)) != len(ids):
            raise IngestSplitError(f"Duplicate sample ids in {split}")

    target = root / meta.id
    target.mkdir(parents=True, exist_ok=True)
    shapes, checksums, datasets = {}, {}, {}
    for split in SPLITS:
        bucket = per_split[split]
        X = (np.stack(bucket["X"]) if bucket["X"] else np.zeros((0, channels, meta.length))).astype("<f4")
        y = np.asarray(bucket["y"], dtype=np.int64)
        blob, labels = target / f"{split}.f32", target / f"{split}.labels.csv"
        _atomic_write(blob, np.ascontiguousarray(X).tobytes())
        _atomic_write(labels, _labels_csv(bucket["ids"], y))
        shapes[split] = list(X.shape)
        checksums[blob.name] = _sha256(blob)
        checksums[labels.name] = _sha256(labels)
        datasets[split] = TimeSeriesDataset(
            id=meta.id, X=X, y=y, class_names=list(meta.class_names), split=split,
            channel_names=channel_names, sample_ids=bucket["ids"], render_style=meta.render_style,
            sample_rate=meta.sample_rate, normalize=meta.normalize,
        )

    manifest = DatasetManifest(
        id=meta.id, shapes=shapes, checksums=checksums, class_names=list(meta.class_names),
        option_letters=letters, channel_names=channel_names, render_style=meta.render_style,
        sample_rate=meta.sample_rate, nan_policy=policy.value, normalize=meta.normalize,
        padded={s: per_split[s]["padded"] for s in SPLITS},
        truncated={s: per_split[s]["truncated"] for s in SPLITS},
        provenance=meta.provenance,
    )
    payload = json.dumps(manifest.to_dict(), indent=2, sort_keys=True).encode("utf-8")
    _atomic_write(target / "manifest.json", payload)
    logger.info(
        f"Ingested {meta.id}: train={shapes['train']} test={shapes['test']} "
        f"C={len(meta.class_names)} padded={manifest.padded} truncated={manifest.truncated}"
    )
    return datasets


def load_manifest(dataset_id: str, root: Optional[Path] = None) -> DatasetManifest:
    path = Path(root or config.DATA_DIR) / dataset_id / "manifest.json"
    if not path.exists():
        raise NotFoundError(f"No dataset {dataset_id!r} under {path.parent.parent}")
    with open(path, "r", encoding="utf-8") as f:
        return DatasetManifest.from_dict(json.load(f))


def load_split(dataset_id: str, split: str, root: Optional[Path] = None) -> TimeSeriesDataset:
    """Load one split after verifying the manifest checksums."""
    if split not in SPLITS:
        raise NotFoundError(f"Unknown split {split!r}")
    root = Path(root or config.DATA_DIR)
    manifest = load_manifest(dataset_id, root)
    folder = root / dataset_id
    blob, labels = folder / f"{split}.f32", folder / f"{split}.labels.csv"
    for path in (blob, labels):
        if not path.exists():
            raise CorruptStoreError(f"Missing store file {path}")
        if _sha256(path) != manifest.checksums.get(path.name):
            raise CorruptStoreError(f"Checksum mismatch for {path}")

    shape = manifest.shapes[split]
    X = np.frombuffer(blob.read_bytes(), dtype="<f4")
    if X.size != int(np.prod(shape)):
        raise CorruptStoreError(f"{blob} holds {X.size} values, manifest declares {shape}")
    frame = pd.read_csv(labels, dtype={"sample_id": str})
    return TimeSeriesDataset(
        id=dataset_id, X=X.reshape(shape).copy(), y=frame["label"].to_numpy(dtype=np.int64),
        class_names=manifest.class_names, split=split, channel_names=manifest.channel_names,
        sample_ids=frame["sample_id"].tolist(), render_style=manifest.render_style,
        sample_rate=manifest.sample_rate, normalize=manifest.normalize,
    )


def describe(dataset_id: str, root: Optional[Path] = None) -> dict:
    """Manifest summary: N, V, T, C and class balance (keyed by option letter) per split."""
    root = Path(root or config.DATA_DIR)
    manifest = load_manifest(dataset_id, root)
    letters = manifest.option_letters
    summary = {
        "id": dataset_id,
        "V": len(manifest.channel_names),
        "T": manifest.shapes["train"][2],
        "C": len(manifest.class_names),
        "class_names": dict(zip(letters, manifest.class_names)),
        "splits": {},
    }
    for split in SPLITS:
        ds = load_split(dataset_id, split, root)
        counts = np.bincount(ds.y, minlength=ds.n_classes + 1)[1:]
        summary["splits"][split] = {
            "N": len(ds),
            "class_balance": {letter: int(n) for letter, n in zip(letters, counts)},
        }
    return summary


def list_datasets(root: Optional[Path] = None) -> List[str]:
    root = Path(root or config.DATA_DIR)
    if not root.exists():
        return []
    return sorted(p.name for p in root.iterdir() if (p / "manifest.json").exists())


def subsample(ds: TimeSeriesDataset, n: int, seed: int) -> TimeSeriesDataset:
    """Stratified random subset of n rows under seed (ablation setting)."""
    if n >= len(ds):
        return ds
    indices = np.arange(len(ds))
    try:
        keep, _ = train_test_split(indices, train_size=n, stratify=ds.y, random_state=seed)
    except ValueError as e:
        raise InsufficientSamplesError(f"cannot draw a stratified {n}-row subset of {ds.id}/{ds.split}: {e}") from e
    keep = np.sort(keep)
    return TimeSeriesDataset(
        id=ds.id, X=ds.X[keep], y=ds.y[keep], class_names=ds.class_names, split=ds.split,
        channel_names=ds.channel_names, sample_ids=[ds.sample_ids[i] for i in keep],
        render_style=ds.render_style, sample_rate=ds.sample_rate, normalize=ds.normalize,
    )


def series_for_representation(ds: TimeSeriesDataset, index: int) -> np.ndarray:
    """Sample `index` as V x T, z-scored per channel when the dataset asks for it."""
    sample = ds.X[index]
    if not ds.normalize:
        return sample
    sample = sample.astype(np.float64)
    mean = sample.mean(axis=1, keepdims=True)
    std = sample.std(axis=1, keepdims=True)
    std[std == 0] = 1.0
    return (sample - mean) / std
