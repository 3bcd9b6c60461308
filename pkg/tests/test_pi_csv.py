from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from pilearn.data import LabeledDataset, RelabelRecord
from pilearn.pi_csv import (
    PiCsvError,
    read_features_csv,
    read_meta_json,
    read_pi_csv,
    write_features_csv,
    write_meta_json,
    write_pi_csv,
)

GOLDEN = Path(__file__).parent / "fixtures" / "pi_csv_golden"


def _toy_splits_and_record(seed=0):
    rng = np.random.default_rng(seed)
    n_train, n_val, m = 8, 3, 4
    n = n_train + n_val
    X = rng.normal(size=(n, 3))
    y = rng.integers(0, 5, size=n)
    ids = np.arange(100, 100 + n)
    record = RelabelRecord(
        example_ids=ids,
        labels=rng.integers(0, 5, size=(n, m)),
        confidences=rng.uniform(0.01, 1.0, size=(n, m)),
        annotator_accuracies=rng.uniform(0.5, 0.95, size=m),
        annotator_param_counts=rng.integers(10_000, 10_000_000, size=m),
    )
    def make(split, sl):
        return LabeledDataset(X=X[sl], y_clean=y[sl], y_noisy=y[sl].copy(),
                              n_classes=5, ids=ids[sl], split=split)
    splits = {"train": make("train", slice(0, n_train)),
              "val": make("val", slice(n_train, n))}
    return splits, record


def test_write_then_read_roundtrip_to_confidence_precision(tmp_path):
    splits, record = _toy_splits_and_record()
    write_pi_csv(record, splits, tmp_path)
    bundle = read_pi_csv(tmp_path)
    assert np.array_equal(bundle.train_ids, splits["train"].ids)
    assert np.array_equal(bundle.val_ids, splits["val"].ids)
    assert np.array_equal(bundle.record.example_ids, record.example_ids)
    assert np.array_equal(bundle.record.labels, record.labels)
    assert np.allclose(bundle.record.confidences, record.confidences, atol=5e-7)
    assert np.allclose(bundle.record.annotator_accuracies,
                       record.annotator_accuracies, atol=5e-7)
    assert np.array_equal(bundle.record.annotator_param_counts,
                          record.annotator_param_counts)


def test_wire_files_have_expected_layout(tmp_path):
    splits, record = _toy_splits_and_record()
    write_pi_csv(record, splits, tmp_path)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["annotator-features.csv", "confidences-train.csv",
                     "confidences-validation.csv", "labels-train.csv",
                     "labels-validation.csv"]
    first = (tmp_path / "labels-train.csv").read_text().splitlines()[0]
    fields = first.split(",")
    assert fields[0] == str(splits["train"].ids[0])
    assert len(fields) == 1 + record.labels.shape[1]
    annot = (tmp_path / "annotator-features.csv").read_text().splitlines()
    assert len(annot) == record.labels.shape[1]
    conf_line = (tmp_path / "confidences-train.csv").read_text().splitlines()[0]
    for value in conf_line.split(",")[1:]:
        assert len(value.split(".")[1]) == 6


def test_rewrite_is_byte_identical(tmp_path):
    splits, record = _toy_splits_and_record()
    dir_a = tmp_path / "a"
    dir_b = tmp_path / "b"
    write_pi_csv(record, splits, dir_a)
    write_pi_csv(record, splits, dir_b)
    for name in ("labels-train.csv", "confidences-validation.csv",
                 "annotator-features.csv"):
        assert (dir_a / name).read_bytes() == (dir_b / name).read_bytes()


def test_golden_fixture_parses_to_expected_record():
    bundle = read_pi_csv(GOLDEN)
    record = bundle.record
    assert np.array_equal(bundle.train_ids, [17, 4])
    assert np.array_equal(bundle.val_ids, [9])
    # "17,3,3,5": image id 17, annotator labels 3, 3, 5
    assert np.array_equal(record.labels[0], [3, 3, 5])
    assert np.array_equal(record.labels[1], [0, 1, 0])
    assert np.array_equal(record.labels[2], [2, 2, 2])
    assert record.confidences[0] == pytest.approx([0.35, 0.42, 0.11])
    assert record.annotator_accuracies == pytest.approx([0.71, 0.65, 0.82])
    assert np.array_equal(record.annotator_param_counts,
                          [24_000_000, 5_600_000, 151_000_000])
    assert record.n_annotators == 3


def test_malformed_row_error_names_file_and_line(tmp_path):
    splits, record = _toy_splits_and_record()
    write_pi_csv(record, splits, tmp_path)
    path = tmp_path / "labels-train.csv"
    lines = path.read_text().splitlines()
    lines[1] = lines[1] + ",99"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(PiCsvError, match=r"labels-train\.csv:2"):
        read_pi_csv(tmp_path)


def test_non_numeric_field_error_names_file_and_line(tmp_path):
    splits, record = _toy_splits_and_record()
    write_pi_csv(record, splits, tmp_path)
    path = tmp_path / "confidences-validation.csv"
    lines = path.read_text().splitlines()
    parts = lines[0].split(",")
    parts[1] = "not-a-number"
    lines[0] = ",".join(parts)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(PiCsvError, match=r"confidences-validation\.csv:1"):
        read_pi_csv(tmp_path)


def test_column_count_must_match_annotator_rows(tmp_path):
    splits, record = _toy_splits_and_record()
    write_pi_csv(record, splits, tmp_path)
    annot = tmp_path / "annotator-features.csv"
    lines = annot.read_text().splitlines()
    annot.write_text("\n".join(lines[:-1]) + "\n")  # drop one annotator row
    with pytest.raises(PiCsvError, match="labels-train"):
        read_pi_csv(tmp_path)


def test_features_csv_roundtrip(tmp_path):
    splits, _ = _toy_splits_and_record()
    test_split = LabeledDataset(
        X=np.random.default_rng(5).normal(size=(4, 3)),
        y_clean=np.array([0, 1, 2, 3]), y_noisy=np.array([0, 1, 2, 3]),
        n_classes=5, ids=np.arange(900, 904), split="test")
    datasets = dict(splits, test=test_split)
    path = tmp_path / "features.csv"
    write_features_csv(datasets, path)
    loaded = read_features_csv(path, n_classes=5)
    for name, ds in datasets.items():
        assert np.array_equal(loaded[name].ids, ds.ids)
        assert np.array_equal(loaded[name].y_clean, ds.y_clean)
        assert np.array_equal(loaded[name].X, ds.X)  # %.17g is exact for float64


def test_meta_json_roundtrip(tmp_path):
    meta = {"beta": 0.1, "policy": "worst", "seed": 7, "n_classes": 4}
    write_meta_json(meta, tmp_path)
    assert read_meta_json(tmp_path) == meta
