"""Optimization harness: schedule, SGD step, splits, early stopping, grids.

One training run is strictly sequential and fully determined by its config
and seed; stochasticity (init, batch order, temperature draws) is routed
through named substreams derived from the seed so that any sub-artifact can
be replayed in isolation.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, fields, replace

import numpy as np

from .autodiff import ParamStore

EARLY_STOP_MODES = ("noisy_val", "clean_val", "none")

# Decay points default to these fractions of the epoch budget, so long and
# short runs share one schedule rule.
DEFAULT_DECAY_FRACTIONS = (0.3, 0.6, 0.8)


def rng_stream(seed: int, *keys) -> np.random.Generator:
    """Deterministic generator for a named substream of a master seed."""
    words = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            words.append(zlib.crc32(key.encode()))
        else:
            words.append(int(key) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 0.1
    decay_factor: float = 0.2
    decay_epochs: tuple[int, ...] | None = None  # None: use DEFAULT_DECAY_FRACTIONS
    momentum: float = 0.9
    nesterov: bool = True
    l2: float = 1e-4
    loss_weight: float = 1.0
    seed: int = 0
    early_stop: str = "noisy_val"
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss_weight < 0:
            raise ValueError("loss weight must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val fraction must be in (0, 1)")
        if self.early_stop not in EARLY_STOP_MODES:
            raise ValueError(f"early_stop must be one of {EARLY_STOP_MODES}")
        points = self.resolved_decay_epochs()
        if any(b <= a for a, b in zip(points, points[1:])) or any(
                p >= self.epochs for p in points):
            raise ValueError("decay epochs must be strictly increasing and < epochs")

    def resolved_decay_epochs(self) -> tuple[int, ...]:
        if self.decay_epochs is not None:
            return tuple(self.decay_epochs)
        points = []
        for frac in DEFAULT_DECAY_FRACTIONS:
            p = int(np.floor(frac * self.epochs))
            if 0 < p < self.epochs and (not points or p > points[-1]):
                points.append(p)
        return tuple(points)

    def with_(self, **overrides) -> "TrainConfig":
        return replace(self, **overrides)

    def to_json_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        kwargs = dict(data)
        if kwargs.get("decay_epochs") is not None:
            kwargs["decay_epochs"] = tuple(kwargs["decay_epochs"])
        return cls(**kwargs)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Step-decay schedule: initial rate times factor per passed decay point."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    n_decays = sum(1 for p in config.resolved_decay_epochs() if p <= epoch)
    return config.learning_rate * config.decay_factor ** n_decays


def sgd_step(store: ParamStore, lr: float, momentum: float = 0.0, l2: float = 0.0,
             nesterov: bool = True) -> None:
    """Apply one SGD step from the store's accumulated gradients.

    L2 is added to the gradient (weights only, per the store's decay flags)
    rather than to the loss. With ``nesterov`` the update uses the look-ahead
    form  v <- mu*v + g;  w <- w - lr*(g + mu*v);  plain momentum uses
    w <- w - lr*v. Momentum buffers persist across steps.
    """
    for name, value in store.values.items():
        g = store.grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if l2 and store.weight_decay[name]:
            g = g + l2 * value
        if momentum:
            buf = store.momentum[name]
            buf *= momentum
            buf += g
            if nesterov:
                value -= lr * (g + momentum * buf)
            else:
                value -= lr * buf
        else:
            value -= lr * g


def split_train_val(dataset, fraction: float, seed: int):
    """Disjoint deterministic (train, val) split of any dataset with
    ``__len__`` and ``subset(indices)``."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("val fraction must be in (0, 1)")
    n = len(dataset)
    n_val = int(round(n * fraction))
    if n_val < 1 or n_val >= n:
        raise ValueError(f"split of {n} examples at fraction {fraction} leaves an empty part")
    perm = rng_stream(seed, "train_val_split").permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return dataset.subset(train_idx), dataset.subset(val_idx)


@dataclass
class EpochRecord:
    """Per-epoch measurements; one row of the dynamics trace plus loop state.

    Partition accuracies are None when the quantity does not exist for the
    run (single-head methods have no PI-head columns; a noiseless dataset has
    no mislabeled partition).
    """

    epoch: int
    learning_rate: float
    train_loss: float
    noisy_val_accuracy: float | None = None
    clean_val_accuracy: float | None = None
    test_accuracy: float | None = None
    clean_at_pi: float | None = None
    mislabeled_at_pi: float | None = None
    clean_at_plain: float | None = None
    mislabeled_at_plain: float | None = None


def early_stop_select(history: list[EpochRecord], mode: str) -> int:
    """Index of the selected epoch; earliest epoch wins ties."""
    if not history:
        raise ValueError("empty training history")
    if mode not in EARLY_STOP_MODES:
        raise ValueError(f"unknown early-stop mode {mode!r}")
    if mode == "none":
        return len(history) - 1
    attr = "noisy_val_accuracy" if mode == "noisy_val" else "clean_val_accuracy"
    best, best_value = 0, None
    for i, record in enumerate(history):
        value = getattr(record, attr)
        if value is None:
            raise ValueError(f"epoch {record.epoch} has no {attr} for mode {mode!r}")
        if best_value is None or value > best_value:
            best, best_value = i, value
    return best


def grid_search(points, runner):
    """Evaluate every lattice point; pick the best validation accuracy.

    ``runner(point)`` returns ``(val_accuracy, payload)``. Ties break toward
    the earliest lattice point, so the result is independent of any
    enumeration concern beyond the given order.
    """
    points = list(points)
    if not points:
        raise ValueError("empty grid")
    results = []
    best = None
    for i, point in enumerate(points):
        val_accuracy, payload = runner(point)
        results.append((point, val_accuracy, payload))
        if best is None or val_accuracy > best[1]:
            best = (i, val_accuracy)
    index = best[0]
    return points[index], results[index][2], results


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield shuffled index batches covering all n examples once."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
