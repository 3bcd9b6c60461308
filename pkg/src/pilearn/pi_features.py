"""Privileged-information feature families with a uniform matrix type.

Each builder returns a :class:`PIMatrix`: one row per training example, a
fixed width per kind, and a kind tag. The synthetic families (indicator,
labels, near-optimal) are oracle constructions from the clean/noisy label
pair; the annotator family mirrors real annotation metadata; random-ID rows
give every example a unique, easily memorized signature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .data import RelabelRecord
from .nets import one_hot
from .training import rng_stream

PI_KINDS = ("original", "indicator", "labels", "near_optimal", "random_id", "composite")


@dataclass(frozen=True)
class PIMatrix:
    data: np.ndarray  # n_examples x width
    kind: str

    def __post_init__(self):
        if self.kind not in PI_KINDS:
            raise ValueError(f"unknown PI kind {self.kind!r}")
        if self.data.ndim != 2:
            raise ValueError("PI data must be 2-D")

    def __len__(self) -> int:
        return len(self.data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def take(self, indices) -> "PIMatrix":
        return PIMatrix(self.data[np.asarray(indices)], self.kind)


def _check_aligned(y_clean, y_noisy) -> tuple[np.ndarray, np.ndarray]:
    y_clean = np.asarray(y_clean, dtype=int)
    y_noisy = np.asarray(y_noisy, dtype=int)
    if y_clean.shape != y_noisy.shape:
        raise ValueError(
            f"label sequences differ in length: {y_clean.shape} vs {y_noisy.shape}")
    return y_clean, y_noisy


def indicator_pi(y_clean, y_noisy) -> PIMatrix:
    """Single column: 1 where the clean and noisy labels agree, else 0."""
    y_clean, y_noisy = _check_aligned(y_clean, y_noisy)
    return PIMatrix((y_clean == y_noisy).astype(float)[:, None], "indicator")


def labels_pi(y_noisy, n_classes: int) -> PIMatrix:
    """Fully predictive PI: the one-hot encoded noisy labels themselves."""
    return PIMatrix(one_hot(np.asarray(y_noisy, dtype=int), n_classes), "labels")


def near_optimal_pi(y_clean, y_noisy, n_classes: int) -> PIMatrix:
    """Agreement indicator plus the noisy-label one-hot on mislabeled rows only.

    Correctly labeled rows get [1, 0...0]; mislabeled rows get
    [0, one_hot(noisy label)]. This confines the memorization shortcut to the
    mislabeled examples.
    """
    y_clean, y_noisy = _check_aligned(y_clean, y_noisy)
    agree = y_clean == y_noisy
    block = one_hot(y_noisy, n_classes)
    block[agree] = 0.0
    return PIMatrix(np.hstack([agree.astype(float)[:, None], block]), "near_optimal")


def random_id_pi(n_examples: int, width: int, seed: int) -> PIMatrix:
    """Unique random signature per example: i.i.d. standard normal rows."""
    if width < 1:
        raise ValueError("random PI width must be >= 1")
    rng = rng_stream(seed, "random_id")
    return PIMatrix(rng.normal(size=(n_examples, width)), "random_id")


def annotator_pi(record: RelabelRecord, chosen_annotator) -> PIMatrix:
    """Metadata of the selected annotation per example.

    Row: [confidence of the selected annotation, selected annotator's clean
    accuracy, log10 of its parameter count]. The log keeps parameter counts,
    which span orders of magnitude, on a standardizable scale.
    """
    chosen = np.asarray(chosen_annotator, dtype=int)
    n = len(record.example_ids)
    if len(chosen) != n:
        raise ValueError("chosen annotator indices do not align with the record")
    if record.annotator_accuracies.size == 0 or record.annotator_param_counts.size == 0:
        raise ValueError("relabel record lacks annotator metadata")
    confidence = record.confidences[np.arange(n), chosen]
    accuracy = record.annotator_accuracies[chosen]
    log_params = np.log10(record.annotator_param_counts[chosen].astype(float))
    return PIMatrix(np.column_stack([confidence, accuracy, log_params]), "original")


def concat_pi(a: PIMatrix, b: PIMatrix) -> PIMatrix:
    if len(a) != len(b):
        raise ValueError(f"row counts differ: {len(a)} vs {len(b)}")
    return PIMatrix(np.hstack([a.data, b.data]), "composite")


def standardize_pi(a: PIMatrix, stats: tuple[np.ndarray, np.ndarray] | None = None
                   ) -> tuple[PIMatrix, tuple[np.ndarray, np.ndarray]]:
    """Per-column zero mean / unit variance; zero-variance columns unchanged.

    With ``stats=None`` the statistics are computed from ``a`` (the fitting
    split); pass the returned stats to apply the same affine map to new rows.
    """
    if stats is None:
        mean = a.data.mean(axis=0) if len(a) else np.zeros(a.width)
        std = a.data.std(axis=0) if len(a) else np.ones(a.width)
        constant = std == 0.0
        mean = np.where(constant, 0.0, mean)
        std = np.where(constant, 1.0, std)
        stats = (mean, std)
    mean, std = stats
    return PIMatrix((a.data - mean) / std, a.kind), stats


class PIStandardizer(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :func:`standardize_pi` (fit on train only)."""

    def fit(self, X, y=None):
        pi = X if isinstance(X, PIMatrix) else PIMatrix(np.asarray(X, dtype=float), "original")
        _, self.stats_ = standardize_pi(pi)
        return self

    def transform(self, X):
        pi = X if isinstance(X, PIMatrix) else PIMatrix(np.asarray(X, dtype=float), "original")
        out, _ = standardize_pi(pi, self.stats_)
        return out if isinstance(X, PIMatrix) else out.data
