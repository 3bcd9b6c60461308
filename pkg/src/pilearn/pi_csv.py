"""The five-file CSV wire format for relabeled datasets, plus dataset dirs.

Wire layout (no header rows, LF newlines, base-10 integer ids and labels,
confidences with 6 decimal places):

    labels-train.csv          <image_id>,<label_1>,...,<label_M>
    labels-validation.csv     same layout, validation examples
    confidences-train.csv     <image_id>,<confidence_1>,...,<confidence_M>
    confidences-validation.csv
    annotator-features.csv    <model_accuracy>,<number_of_model_parameters>
                              (exactly M rows, one per annotator)

A generated dataset directory additionally holds ``features.csv`` (example
id, split tag, clean label, raw features at full precision) and
``dataset-meta.json`` (generation parameters needed to reproduce the noisy
label selection deterministically).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LabeledDataset, RelabelRecord

WIRE_FILES = (
    "labels-train.csv",
    "labels-validation.csv",
    "confidences-train.csv",
    "confidences-validation.csv",
    "annotator-features.csv",
)

FEATURES_FILE = "features.csv"
META_FILE = "dataset-meta.json"


class PiCsvError(ValueError):
    """Malformed wire file; message carries file name and line number."""


def _format_confidence(value: float) -> str:
    return f"{value:.6f}"


def write_pi_csv(record: RelabelRecord, splits: dict[str, LabeledDataset], dir_path) -> None:
    """Write the five wire files for the train and validation splits.

    ``splits`` maps "train" and "val" to datasets whose ids select rows of
    the record.
    """
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    row_of = {int(example_id): i for i, example_id in enumerate(record.example_ids)}
    for split_name, file_tag in (("train", "train"), ("val", "validation")):
        split = splits[split_name]
        rows = [row_of[int(example_id)] for example_id in split.ids]
        with open(out / f"labels-{file_tag}.csv", "w", newline="\n") as fh:
            for example_id, r in zip(split.ids, rows):
                fields = [str(int(example_id))] + [str(int(v)) for v in record.labels[r]]
                fh.write(",".join(fields) + "\n")
        with open(out / f"confidences-{file_tag}.csv", "w", newline="\n") as fh:
            for example_id, r in zip(split.ids, rows):
                fields = [str(int(example_id))]
                fields += [_format_confidence(v) for v in record.confidences[r]]
                fh.write(",".join(fields) + "\n")
    with open(out / "annotator-features.csv", "w", newline="\n") as fh:
        for accuracy, count in zip(record.annotator_accuracies, record.annotator_param_counts):
            fh.write(f"{_format_confidence(accuracy)},{int(count)}\n")


def _parse_rows(path: Path, n_fields: int, kind: str) -> list[list[str]]:
    rows = []
    with open(path, "r") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != n_fields:
                raise PiCsvError(
                    f"{path.name}:{line_no}: expected {n_fields} {kind} fields, "
                    f"got {len(fields)}")
            rows.append((line_no, fields))
    return rows


def _parse_int(path: Path, line_no: int, text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise PiCsvError(f"{path.name}:{line_no}: not an integer: {text!r}") from None


def _parse_float(path: Path, line_no: int, text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise PiCsvError(f"{path.name}:{line_no}: not a number: {text!r}") from None


@dataclass
class PiCsvBundle:
    """Parsed wire files: one record covering train then validation rows."""

    record: RelabelRecord
    train_ids: np.ndarray
    val_ids: np.ndarray


def read_pi_csv(dir_path) -> PiCsvBundle:
    """Exact inverse of :func:`write_pi_csv` (confidences at 6 decimals)."""
    root = Path(dir_path)
    annot_path = root / "annotator-features.csv"
    if not annot_path.exists():
        raise PiCsvError(f"{annot_path.name}:0: file not found in {root}")
    annotator_rows = _parse_rows(annot_path, 2, "annotator-feature")
    accuracies = np.array([_parse_float(annot_path, n, f[0]) for n, f in annotator_rows])
    param_counts = np.array([_parse_int(annot_path, n, f[1]) for n, f in annotator_rows],
                            dtype=int)
    m = len(annotator_rows)
    if m == 0:
        raise PiCsvError(f"{annot_path.name}:0: no annotator rows")

    ids: dict[str, np.ndarray] = {}
    labels: dict[str, np.ndarray] = {}
    confidences: dict[str, np.ndarray] = {}
    for tag in ("train", "validation"):
        lab_path = root / f"labels-{tag}.csv"
        rows = _parse_rows(lab_path, m + 1, "label")
        ids[tag] = np.array([_parse_int(lab_path, n, f[0]) for n, f in rows], dtype=int)
        labels[tag] = np.array(
            [[_parse_int(lab_path, n, v) for v in f[1:]] for n, f in rows],
            dtype=int).reshape(len(rows), m)
        conf_path = root / f"confidences-{tag}.csv"
        rows = _parse_rows(conf_path, m + 1, "confidence")
        conf_ids = np.array([_parse_int(conf_path, n, f[0]) for n, f in rows], dtype=int)
        if not np.array_equal(conf_ids, ids[tag]):
            raise PiCsvError(f"{conf_path.name}:0: ids disagree with labels-{tag}.csv")
        confidences[tag] = np.array(
            [[_parse_float(conf_path, n, v) for v in f[1:]] for n, f in rows]
        ).reshape(len(rows), m)

    record = RelabelRecord(
        example_ids=np.concatenate([ids["train"], ids["validation"]]),
        labels=np.vstack([labels["train"], labels["validation"]]),
        confidences=np.vstack([confidences["train"], confidences["validation"]]),
        annotator_accuracies=accuracies,
        annotator_param_counts=param_counts,
    )
    return PiCsvBundle(record=record, train_ids=ids["train"], val_ids=ids["validation"])


# -- full dataset directories ---------------------------------------------------


def write_features_csv(datasets: dict[str, LabeledDataset], path) -> None:
    """``<image_id>,<split>,<y_clean>,<x_1>,...`` at full float precision."""
    with open(path, "w", newline="\n") as fh:
        for split_name in ("train", "val", "test"):
            ds = datasets.get(split_name)
            if ds is None:
                continue
            for i in range(len(ds)):
                fields = [str(int(ds.ids[i])), split_name, str(int(ds.y_clean[i]))]
                fields += [f"{v:.17g}" for v in ds.X[i]]
                fh.write(",".join(fields) + "\n")


def read_features_csv(path, n_classes: int) -> dict[str, LabeledDataset]:
    path = Path(path)
    by_split: dict[str, list] = {"train": [], "val": [], "test": []}
    n_features = None
    with open(path, "r") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(",")
            if len(fields) < 4:
                raise PiCsvError(f"{path.name}:{line_no}: too few fields")
            if fields[1] not in by_split:
                raise PiCsvError(f"{path.name}:{line_no}: unknown split {fields[1]!r}")
            if n_features is None:
                n_features = len(fields) - 3
            elif len(fields) - 3 != n_features:
                raise PiCsvError(f"{path.name}:{line_no}: inconsistent feature count")
            example_id = _parse_int(path, line_no, fields[0])
            label = _parse_int(path, line_no, fields[2])
            x = [_parse_float(path, line_no, v) for v in fields[3:]]
            by_split[fields[1]].append((example_id, label, x))
    out = {}
    for split_name, rows in by_split.items():
        if not rows:
            continue
        ids = np.array([r[0] for r in rows], dtype=int)
        y = np.array([r[1] for r in rows], dtype=int)
        X = np.array([r[2] for r in rows])
        out[split_name] = LabeledDataset(
            X=X, y_clean=y, y_noisy=y.copy(), n_classes=n_classes, ids=ids,
            split=split_name)
    return out


def write_meta_json(meta: dict, dir_path) -> None:
    with open(Path(dir_path) / META_FILE, "w", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_meta_json(dir_path) -> dict:
    with open(Path(dir_path) / META_FILE, "r") as fh:
        return json.load(fh)
