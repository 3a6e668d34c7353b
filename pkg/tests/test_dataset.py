import json

import numpy as np
import pandas as pd
import pytest

from conftest import TOY_CLASSES, toy_records
from dataset import (
    DatasetMeta,
    LabeledSequence,
    NanPolicy,
    describe,
    ingest,
    list_datasets,
    load_manifest,
    load_split,
    read_source_table,
    series_for_representation,
    subsample,
)
from errors import (
    CorruptStoreError,
    IngestLabelError,
    IngestShapeError,
    IngestSplitError,
    IngestValueError,
    InsufficientSamplesError,
    NotFoundError,
)


def _meta(**overrides):
    fields = dict(id="toy", class_names=list(TOY_CLASSES), length=8)
    fields.update(overrides)
    return DatasetMeta(**fields)


def test_ingest_then_load_is_bit_identical(toy_datasets, data_root):
    for split in ("train", "test"):
        loaded = load_split("toy", split, data_root)
        written = toy_datasets[split]
        assert loaded.X.dtype == np.float32
        assert np.array_equal(loaded.X, written.X)
        assert np.array_equal(loaded.y, written.y)
        assert loaded.sample_ids == written.sample_ids


def test_labels_are_one_based_in_class_name_order(toy_datasets):
    train = toy_datasets["train"]
    assert set(train.y.tolist()) == {1, 2}
    assert train.labels_by_id()["train-low-0"] == 1
    assert train.labels_by_id()["train-high-0"] == 2
    assert train.option_letters == ["A", "B"]


def test_manifest_records_shapes_and_checksums(toy_datasets, data_root):
    manifest = load_manifest("toy", data_root)
    assert manifest.shapes == {"train": [20, 1, 8], "test": [10, 1, 8]}
    assert set(manifest.checksums) == {"train.f32", "train.labels.csv", "test.f32", "test.labels.csv"}
    assert manifest.channel_names == ["ch0"]


def test_describe_reports_balance_by_letter(toy_datasets, data_root):
    info = describe("toy", data_root)
    assert (info["V"], info["T"], info["C"]) == (1, 8, 2)
    assert info["class_names"] == {"A": "low", "B": "high"}
    assert info["splits"]["test"] == {"N": 10, "class_balance": {"A": 5, "B": 5}}


def test_list_datasets(toy_datasets, data_root):
    assert list_datasets(data_root) == ["toy"]


def test_short_series_padded_with_last_value_and_long_truncated(data_root):
    records = [
        LabeledSequence("a", "train", "low", np.array([[1.0, 2.0, 3.0]])),
        LabeledSequence("b", "train", "high", np.arange(12, dtype=float)[np.newaxis, :]),
        LabeledSequence("c", "test", "low", np.ones((1, 8))),
    ]
    out = ingest(records, _meta(), data_root)
    assert out["train"].X[0, 0].tolist() == [1, 2, 3, 3, 3, 3, 3, 3]
    assert out["train"].X[1, 0].tolist() == list(range(8))
    manifest = load_manifest("toy", data_root)
    assert manifest.padded["train"] == 1
    assert manifest.truncated["train"] == 1


def test_unknown_label_rejected(data_root):
    records = [LabeledSequence("a", "train", "medium", np.ones((1, 8)))]
    with pytest.raises(IngestLabelError):
        ingest(records, _meta(), data_root)


def test_channel_count_mismatch_rejected(data_root):
    records = [
        LabeledSequence("a", "train", "low", np.ones((1, 8))),
        LabeledSequence("b", "train", "high", np.ones((2, 8))),
    ]
    with pytest.raises(IngestShapeError):
        ingest(records, _meta(), data_root)


def test_overlapping_split_ids_rejected(data_root):
    records = [
        LabeledSequence("a", "train", "low", np.ones((1, 8))),
        LabeledSequence("a", "test", "low", np.ones((1, 8))),
    ]
    with pytest.raises(IngestSplitError):
        ingest(records, _meta(), data_root)


def test_nan_policies(data_root):
    values = np.array([[np.nan, 1.0, np.nan, 3.0, 3.0, 3.0, 3.0, 3.0]])
    records = [LabeledSequence("a", "train", "low", values), LabeledSequence("b", "test", "high", np.ones((1, 8)))]

    with pytest.raises(IngestValueError):
        ingest(records, _meta(), data_root)

    filled = ingest(records, _meta(nan_policy=NanPolicy.FORWARD_FILL), data_root)
    assert filled["train"].X[0, 0, :3].tolist() == [1.0, 1.0, 1.0]

    zeroed = ingest(records, _meta(nan_policy=NanPolicy.ZERO_FILL), data_root)
    assert zeroed["train"].X[0, 0, :3].tolist() == [0.0, 1.0, 0.0]


def test_infinite_values_always_rejected(data_root):
    values = np.array([[np.inf] + [1.0] * 7])
    records = [LabeledSequence("a", "train", "low", values)]
    with pytest.raises(IngestValueError):
        ingest(records, _meta(nan_policy=NanPolicy.ZERO_FILL), data_root)


def test_tampered_blob_detected(toy_datasets, data_root):
    blob = data_root / "toy" / "test.f32"
    payload = bytearray(blob.read_bytes())
    payload[0] ^= 0xFF
    blob.write_bytes(bytes(payload))
    with pytest.raises(CorruptStoreError):
        load_split("toy", "test", data_root)


def test_missing_dataset(data_root):
    with pytest.raises(NotFoundError):
        load_split("nope", "train", data_root)


def test_read_source_table(tmp_path):
    rows = []
    for sample_id, split, label in (("s1", "train", "low"), ("s2", "test", "high")):
        for channel in ("x", "y"):
            for t in range(3):
                rows.append({"sample_id": sample_id, "split": split, "label": label,
                             "channel": channel, "t": t, "value": t + (10 if channel == "y" else 0)})
    path = tmp_path / "source.csv"
    pd.DataFrame(rows).to_csv(path, index=False)

    records = read_source_table(path)
    assert [r.sample_id for r in records] == ["s1", "s2"]
    assert records[0].values.tolist() == [[0, 1, 2], [10, 11, 12]]
    assert records[1].label == "high"


def test_subsample_is_stratified_and_seeded(data_root):
    meta = _meta()
    datasets = ingest(toy_records(n_train=50, n_test=5), meta, data_root)
    first = subsample(datasets["train"], 20, seed=3)
    again = subsample(datasets["train"], 20, seed=3)
    assert len(first) == 20
    assert first.sample_ids == again.sample_ids
    assert np.bincount(first.y).tolist() == [0, 10, 10]
    assert subsample(datasets["train"], 1000, seed=3) is datasets["train"]


def test_normalize_flag_applies_only_to_representation(data_root):
    records = [
        LabeledSequence("a", "train", "low", np.arange(8, dtype=float)[np.newaxis, :]),
        LabeledSequence("b", "test", "high", np.ones((1, 8))),
    ]
    out = ingest(records, _meta(normalize=True), data_root)
    stored = load_split("toy", "train", data_root)
    assert stored.X[0, 0].tolist() == list(range(8))
    z = series_for_representation(out["train"], 0)
    assert abs(z.mean()) < 1e-9
    assert abs(z.std() - 1.0) < 1e-9
    constant = series_for_representation(out["test"], 0)
    assert constant.tolist() == [[0.0] * 8]
    assert json.loads((data_root / "toy" / "manifest.json").read_text())["normalize"] is True


def test_subsample_needs_every_class_twice_and_room_for_each(data_root):
    dropped = {f"train-high-{i}" for i in range(1, 5)}
    records = [r for r in toy_records(n_train=5, n_test=1) if r.sample_id not in dropped]
    lopsided = ingest(records, _meta(), data_root)["train"]
    with pytest.raises(InsufficientSamplesError, match="toy"):
        subsample(lopsided, 4, seed=0)

    balanced = ingest(toy_records(n_train=5, n_test=1), _meta(), data_root)["train"]
    with pytest.raises(InsufficientSamplesError):
        subsample(balanced, 1, seed=0)


def test_values_beyond_float32_rejected(data_root):
    huge = [LabeledSequence("a", "train", "low", np.array([[1e39] + [1.0] * 7]))]
    with pytest.raises(IngestValueError, match="float32"):
        ingest(huge, _meta(), data_root)
    large = [LabeledSequence("a", "train", "low", np.array([[1e38] + [1.0] * 7]))]
    assert ingest(large, _meta(), data_root)["train"].X[0, 0, 0] == np.float32(1e38)
