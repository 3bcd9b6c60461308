"""Synthetic datasets and the annotator relabeling pipeline.

Clean data are Gaussian clusters with controllable overlap. Noise is
injected either by uniform label flips (sparse noise) or by an ensemble of
small perceptron annotators whose predictive distributions are sharpened or
smeared by stochastic temperature scaling and then sampled; a selection
policy (uniform or worst) collapses the per-annotator labels to one noisy
label per example. Both routes keep the clean labels around so that
memorization dynamics can be partitioned into clean and mislabeled examples.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .autodiff import Tape, backward, accumulate_param_grads
from .nets import MLPSpec, PlainNet, one_hot, softmax_rows
from .training import iterate_batches, rng_stream, sgd_step

PROB_FLOOR = 1e-12  # zeros are clamped here before taking logs

SELECTION_POLICIES = ("uniform", "worst")


@dataclass
class LabeledDataset:
    """Feature matrix plus clean and noisy labels (and optional PI block)."""

    X: np.ndarray
    y_clean: np.ndarray
    y_noisy: np.ndarray
    n_classes: int
    ids: np.ndarray
    split: str = "train"
    pi: object | None = None  # a PIMatrix; test splits carry none

    def __post_init__(self):
        n = len(self.X)
        if not (len(self.y_clean) == len(self.y_noisy) == len(self.ids) == n):
            raise ValueError("dataset arrays disagree on example count")
        for labels in (self.y_clean, self.y_noisy):
            if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
                raise ValueError(f"labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def mislabeled_mask(self) -> np.ndarray:
        return self.y_noisy != self.y_clean

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return replace(
            self,
            X=self.X[idx],
            y_clean=self.y_clean[idx],
            y_noisy=self.y_noisy[idx],
            ids=self.ids[idx],
            pi=self.pi.take(idx) if self.pi is not None else None,
        )

    def with_noise(self, y_noisy: np.ndarray) -> "LabeledDataset":
        return replace(self, y_noisy=np.asarray(y_noisy, dtype=int))

    def with_pi(self, pi) -> "LabeledDataset":
        return replace(self, pi=pi)


def agreement_rate(y_clean: np.ndarray, y_noisy: np.ndarray) -> float:
    """Fraction of examples whose noisy label equals the clean one."""
    return float(np.mean(np.asarray(y_clean) == np.asarray(y_noisy)))


def make_synthetic(n_classes: int, n_examples: int, n_features: int,
                   cluster_spread: float, seed: int) -> LabeledDataset:
    """Clean Gaussian-cluster dataset; labels are cluster indices.

    Cluster centers sit on the unit sphere, so ``cluster_spread`` directly
    controls overlap relative to the inter-center distances.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_features < 2:
        raise ValueError("need at least 2 feature dimensions")
    rng = rng_stream(seed, "synthetic")
    centers = rng.normal(size=(n_classes, n_features))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    y = rng.integers(0, n_classes, size=n_examples)
    X = centers[y] + cluster_spread * rng.normal(size=(n_examples, n_features))
    return LabeledDataset(
        X=X,
        y_clean=y.astype(int),
        y_noisy=y.astype(int).copy(),
        n_classes=n_classes,
        ids=np.arange(n_examples),
    )


def flip_labels(dataset: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Sparse uniform noise: flip a fixed fraction of labels to a wrong class."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("flip fraction must be in [0, 1)")
    rng = rng_stream(seed, "label_flips")
    n = len(dataset)
    n_flip = int(round(fraction * n))
    flip_idx = rng.choice(n, size=n_flip, replace=False)
    y_noisy = dataset.y_clean.copy()
    offsets = rng.integers(1, dataset.n_classes, size=n_flip)
    y_noisy[flip_idx] = (y_noisy[flip_idx] + offsets) % dataset.n_classes
    return dataset.with_noise(y_noisy)


# -- annotator ensemble ---------------------------------------------------------


@dataclass
class AnnotatorModel:
    """One relabeling annotator: a predictive distribution plus metadata."""

    identifier: str
    predict_proba: Callable[[np.ndarray], np.ndarray]
    clean_accuracy: float
    n_parameters: int


def train_annotator_ensemble(
    train: LabeledDataset,
    eval_set: LabeledDataset,
    widths: tuple[int, ...] = (16, 24, 32, 48, 64),
    epochs: int = 40,
    learning_rate: float = 0.1,
    batch_size: int = 64,
    confidence_gain: float = 1.0,
    seed: int = 0,
) -> list[AnnotatorModel]:
    """Fit one small perceptron per width on the clean labels.

    Emulates an ensemble of pre-trained annotator networks at desk scale;
    ``confidence_gain`` scales the logits before the softmax so the ensemble
    can be made as (over)confident as large pre-trained classifiers are.
    """
    annotators = []
    for m, width in enumerate(widths):
        rng = rng_stream(seed, "annotator", m)
        spec = MLPSpec(in_dim=train.X.shape[1], hidden=(width,), repr_dim=width)
        net = PlainNet.build(spec, train.n_classes, rng)
        targets = one_hot(train.y_clean, train.n_classes)
        for epoch in range(epochs):
            for batch in iterate_batches(len(train), batch_size, rng_stream(seed, "annotator_shuffle", m, epoch)):
                tape = Tape()
                loss = net.loss(tape, train.X[batch], targets[batch])
                accumulate_param_grads(tape, backward(tape, loss), net.store)
                sgd_step(net.store, learning_rate, momentum=0.9)
                net.store.zero_grad()
        accuracy = float(np.mean(net.logits(eval_set.X).argmax(axis=1) == eval_set.y_clean))

        def proba(X, _net=net, _gain=confidence_gain):
            return softmax_rows(_gain * _net.logits(X))

        annotators.append(AnnotatorModel(
            identifier=f"mlp-w{width}-{m}",
            predict_proba=proba,
            clean_accuracy=accuracy,
            n_parameters=net.store.n_params(),
        ))
    return annotators


# -- stochastic temperature scaling ---------------------------------------------


def sample_temperature(beta: float, rng: np.random.Generator) -> float:
    """One draw of T ~ Gamma(shape 1, inverse scale beta): -ln(U)/beta."""
    return float(sample_temperatures(beta, 1, rng)[0])


def sample_temperatures(beta: float, size: int, rng: np.random.Generator) -> np.ndarray:
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    u = rng.random(size)
    t = -np.log1p(-u) / beta  # 1 - u in (0, 1], so t >= 0; clamp the measure-zero edge
    return np.maximum(t, np.finfo(float).tiny)


def temper_distribution(p: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(log(p) / T) for one probability row."""
    return temper_rows(np.asarray(p, dtype=np.float64)[None, :],
                       np.asarray([temperature]))[0]


def temper_rows(p: np.ndarray, temperatures: np.ndarray) -> np.ndarray:
    """Row-wise temperature scaling of a matrix of probability rows."""
    temperatures = np.asarray(temperatures, dtype=np.float64)
    if np.any(temperatures <= 0):
        raise ValueError("temperatures must be > 0")
    if np.any(p < 0):
        raise ValueError("probabilities must be >= 0")
    logp = np.log(np.maximum(p, PROB_FLOOR)) / temperatures[:, None]
    return softmax_rows(logp)


def categorical_rows(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per probability row."""
    cdf = np.cumsum(p, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(len(p))
    return (u[:, None] < cdf).argmax(axis=1)


@dataclass
class RelabelRecord:
    """Sampled labels and confidences for every (example, annotator) pair."""

    example_ids: np.ndarray  # N
    labels: np.ndarray  # N x M, int
    confidences: np.ndarray  # N x M, tempered probability of the sampled label
    annotator_accuracies: np.ndarray  # M
    annotator_param_counts: np.ndarray  # M, int

    def __post_init__(self):
        n, m = self.labels.shape
        if self.confidences.shape != (n, m):
            raise ValueError("labels and confidences disagree on shape")
        if len(self.annotator_accuracies) != m or len(self.annotator_param_counts) != m:
            raise ValueError("annotator metadata rows must match annotator count")

    @property
    def n_annotators(self) -> int:
        return self.labels.shape[1]


def relabel(clean: LabeledDataset, annotators: list[AnnotatorModel], beta: float,
            rng: np.random.Generator) -> RelabelRecord:
    """Sample one label per (example, annotator) from tempered predictions.

    A fresh temperature is drawn independently for every (example, annotator)
    pair; the recorded confidence is the tempered probability of the label
    that was actually drawn.
    """
    if not annotators:
        raise ValueError("need at least one annotator")
    n = len(clean)
    m = len(annotators)
    labels = np.zeros((n, m), dtype=int)
    confidences = np.zeros((n, m))
    for j, annotator in enumerate(annotators):
        pred = annotator.predict_proba(clean.X)
        temperatures = sample_temperatures(beta, n, rng)
        tempered = temper_rows(pred, temperatures)
        drawn = categorical_rows(tempered, rng)
        labels[:, j] = drawn
        confidences[:, j] = tempered[np.arange(n), drawn]
    return RelabelRecord(
        example_ids=clean.ids.copy(),
        labels=labels,
        confidences=confidences,
        annotator_accuracies=np.array([a.clean_accuracy for a in annotators]),
        annotator_param_counts=np.array([a.n_parameters for a in annotators], dtype=int),
    )


def select_policy(record: RelabelRecord, y_clean: np.ndarray, policy: str,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Collapse per-annotator labels to one noisy label per example.

    ``uniform`` picks an annotator uniformly at random. ``worst`` picks
    uniformly among annotators whose label is incorrect; when every annotator
    is correct it falls back to a uniform choice (which is then necessarily
    the correct label).
    """
    if policy not in SELECTION_POLICIES:
        raise ValueError(f"policy must be one of {SELECTION_POLICIES}")
    n, m = record.labels.shape
    if len(y_clean) != n:
        raise ValueError("clean labels do not align with the relabel record")
    chosen = rng.integers(0, m, size=n)
    if policy == "worst":
        wrong = record.labels != np.asarray(y_clean)[:, None]
        for i in range(n):
            wrong_idx = np.flatnonzero(wrong[i])
            if wrong_idx.size:
                chosen[i] = wrong_idx[rng.integers(0, wrong_idx.size)]
    y_noisy = record.labels[np.arange(n), chosen]
    return y_noisy, chosen
