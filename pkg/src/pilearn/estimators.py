"""Noisy-label classifiers with a scikit-learn estimator surface.

Every estimator trains on noisy labels and predicts through a pathway that
needs no privileged information at test time. ``fit`` optionally takes the
clean training labels (to record memorization dynamics per partition), a
validation set (for epoch selection), and a clean test set (for per-epoch
test accuracy); the per-epoch measurements land in ``history_``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import check_features, check_labels, check_pi
from .autodiff import ParamStore, Tape, accumulate_param_grads, backward, cross_entropy
from .nets import (
    MLPSpec,
    PINet,
    PITowerSpec,
    PlainNet,
    TwoHeadNet,
    init_sop_residuals,
    distill_targets,
    marginal_predict,
    one_hot,
    smooth_targets,
    softmax_rows,
    sop_logits,
    sop_residual_values,
)
from .training import (
    EpochRecord,
    TrainConfig,
    early_stop_select,
    iterate_batches,
    lr_at,
    rng_stream,
    sgd_step,
)


def accuracy(predicted_labels: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predicted_labels == labels))


def partition_accuracy(predicted, labels, mask) -> float | None:
    """Accuracy on a partition; None when the partition is empty."""
    if not np.any(mask):
        return None
    return float(np.mean(predicted[mask] == labels[mask]))


def run_training_loop(config: TrainConfig, store: ParamStore, n_train: int,
                      batch_step, evaluate) -> tuple[list[EpochRecord], int]:
    """Shared epoch loop: shuffled batches, per-epoch eval, epoch selection.

    ``batch_step(batch_indices, lr)`` performs one optimizer step and returns
    the batch loss; ``evaluate(epoch, lr, train_loss)`` returns the epoch's
    record. Under a validation-based early-stop mode the parameters are
    snapshotted on strict improvement and restored at the end, matching
    :func:`early_stop_select`'s earliest-argmax rule.
    """
    metric_attr = {"noisy_val": "noisy_val_accuracy",
                   "clean_val": "clean_val_accuracy"}.get(config.early_stop)
    history: list[EpochRecord] = []
    best_metric = None
    best_snapshot = None
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        shuffle_rng = rng_stream(config.seed, "shuffle", epoch)
        total, seen = 0.0, 0
        for batch in iterate_batches(n_train, config.batch_size, shuffle_rng):
            loss_value = batch_step(batch, lr)
            total += loss_value * len(batch)
            seen += len(batch)
        record = evaluate(epoch, lr, total / seen)
        history.append(record)
        if metric_attr is not None:
            metric = getattr(record, metric_attr)
            if metric is None:
                raise ValueError(
                    f"early-stop mode {config.early_stop!r} needs a validation set")
            if best_metric is None or metric > best_metric:
                best_metric = metric
                best_snapshot = store.snapshot()
    if best_snapshot is not None:
        store.restore(best_snapshot)
    selected = early_stop_select(history, config.early_stop)
    return history, selected


class _NoisyLabelClassifier(ClassifierMixin, BaseEstimator):
    """Shared plumbing: target construction, eval bookkeeping, predict."""

    def _check_fit_args(self, X, y, y_clean, val, eval_set, n_classes):
        X = check_features(X)
        y, k = check_labels(y, len(X), n_classes)
        if y_clean is not None:
            y_clean, _ = check_labels(y_clean, len(X), k)
        parts = {"X": X, "y": y, "y_clean": y_clean, "n_classes": k}
        if val is not None:
            X_val = check_features(val[0])
            y_val, _ = check_labels(val[1], len(X_val), k)
            y_val_clean = None
            if len(val) > 2 and val[2] is not None:
                y_val_clean, _ = check_labels(val[2], len(X_val), k)
            parts["val"] = (X_val, y_val, y_val_clean)
        if eval_set is not None:
            X_test = check_features(eval_set[0])
            y_test, _ = check_labels(eval_set[1], len(X_test), k)
            parts["eval_set"] = (X_test, y_test)
        return parts

    def _evaluate_factory(self, parts, train_predictions):
        """Build the per-epoch evaluate closure from a prediction hook.

        ``train_predictions()`` returns (pi_head_labels | None, plain_labels)
        on the training split; validation and test predictions go through the
        deployment pathway ``self._predict_labels``.
        """
        y = parts["y"]
        y_clean = parts["y_clean"]
        val = parts.get("val")
        eval_set = parts.get("eval_set")
        mislabeled = (y_clean != y) if y_clean is not None else None

        def evaluate(epoch: int, lr: float, train_loss: float) -> EpochRecord:
            record = EpochRecord(epoch=epoch, learning_rate=lr, train_loss=train_loss)
            if val is not None:
                X_val, y_val, y_val_clean = val
                val_pred = self._predict_labels(X_val)
                record.noisy_val_accuracy = accuracy(val_pred, y_val)
                if y_val_clean is not None:
                    record.clean_val_accuracy = accuracy(val_pred, y_val_clean)
            if eval_set is not None:
                record.test_accuracy = accuracy(self._predict_labels(eval_set[0]),
                                                eval_set[1])
            if mislabeled is not None:
                pi_pred, plain_pred = train_predictions()
                clean_mask = ~mislabeled
                if pi_pred is not None:
                    record.clean_at_pi = partition_accuracy(pi_pred, y, clean_mask)
                    record.mislabeled_at_pi = partition_accuracy(pi_pred, y, mislabeled)
                record.clean_at_plain = partition_accuracy(plain_pred, y, clean_mask)
                record.mislabeled_at_plain = partition_accuracy(plain_pred, y, mislabeled)
            return record

        return evaluate

    def _finalize_fit(self, parts, history, selected):
        self.classes_ = np.arange(parts["n_classes"])
        self.n_features_in_ = parts["X"].shape[1]
        self.history_ = history
        self.selected_epoch_ = selected
        record = history[selected]
        self.val_accuracy_ = record.noisy_val_accuracy
        self.test_accuracy_ = record.test_accuracy
        return self

    def _predict_labels(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


def _sgd(store: ParamStore, config: TrainConfig, lr: float) -> None:
    sgd_step(store, lr, momentum=config.momentum, l2=config.l2,
             nesterov=config.nesterov)
    store.zero_grad()


class PlainClassifier(_NoisyLabelClassifier):
    """Single-head baseline: cross-entropy on the noisy labels, no PI."""

    def __init__(self, hidden=(64, 64), repr_dim=64, config=TrainConfig(),
                 label_smoothing=0.0, n_classes=None):
        self.hidden = hidden
        self.repr_dim = repr_dim
        self.config = config
        self.label_smoothing = label_smoothing
        self.n_classes = n_classes

    def _targets(self, y, k):
        if self.label_smoothing:
            return smooth_targets(y, k, self.label_smoothing)
        return one_hot(y, k)

    def fit(self, X, y, y_clean=None, val=None, eval_set=None, soft_targets=None):
        parts = self._check_fit_args(X, y, y_clean, val, eval_set, self.n_classes)
        X, y, k = parts["X"], parts["y"], parts["n_classes"]
        spec = MLPSpec(X.shape[1], tuple(self.hidden), self.repr_dim)
        net = PlainNet.build(spec, k, rng_stream(self.config.seed, "init"))
        self.net_ = net
        targets = soft_targets if soft_targets is not None else self._targets(y, k)

        def batch_step(batch, lr):
            tape = Tape()
            loss = net.loss(tape, X[batch], targets[batch])
            accumulate_param_grads(tape, backward(tape, loss), net.store)
            _sgd(net.store, self.config, lr)
            return float(loss.value[0, 0])

        evaluate = self._evaluate_factory(
            parts, lambda: (None, net.logits(X).argmax(axis=1)))
        history, selected = run_training_loop(self.config, net.store, len(X),
                                              batch_step, evaluate)
        return self._finalize_fit(parts, history, selected)

    def predict_proba(self, X) -> np.ndarray:
        return softmax_rows(self.net_.logits(check_features(X)))


class TramClassifier(_NoisyLabelClassifier):
    """Two-headed training with stop-gradient routing.

    The PI head sees the representation and the privileged features; the
    plain head sees the representation behind a stop-gradient, so the
    extractor is shaped only by PI-head gradients. The plain-head loss is
    weighted by ``config.loss_weight``; prediction uses the plain head alone.
    """

    def __init__(self, hidden=(64, 64), repr_dim=64, tower_width=64,
                 config=TrainConfig(), label_smoothing=0.0, n_classes=None):
        self.hidden = hidden
        self.repr_dim = repr_dim
        self.tower_width = tower_width
        self.config = config
        self.label_smoothing = label_smoothing
        self.n_classes = n_classes

    def fit(self, X, y, pi=None, y_clean=None, val=None, eval_set=None):
        parts = self._check_fit_args(X, y, y_clean, val, eval_set, self.n_classes)
        X, y, k = parts["X"], parts["y"], parts["n_classes"]
        pi_data = check_pi(pi, len(X))
        net = TwoHeadNet.build(
            MLPSpec(X.shape[1], tuple(self.hidden), self.repr_dim),
            PITowerSpec(pi_data.shape[1], self.tower_width),
            k,
            rng_stream(self.config.seed, "init"),
            loss_weight=self.config.loss_weight,
        )
        self.net_ = net
        if self.label_smoothing:
            targets = smooth_targets(y, k, self.label_smoothing)
        else:
            targets = one_hot(y, k)

        def batch_step(batch, lr):
            tape = Tape()
            loss, _, _ = net.joint_loss(tape, X[batch], pi_data[batch], targets[batch])
            accumulate_param_grads(tape, backward(tape, loss), net.store)
            _sgd(net.store, self.config, lr)
            return float(loss.value[0, 0])

        def train_predictions():
            pi_pred = net.pi_logits(X, pi_data).argmax(axis=1)
            plain_pred = net.plain_logits(X).argmax(axis=1)
            return pi_pred, plain_pred

        evaluate = self._evaluate_factory(parts, train_predictions)
        history, selected = run_training_loop(self.config, net.store, len(X),
                                              batch_step, evaluate)
        return self._finalize_fit(parts, history, selected)

    def predict_proba(self, X) -> np.ndarray:
        return softmax_rows(self.net_.plain_logits(check_features(X)))


class PIMarginalClassifier(_NoisyLabelClassifier):
    """Single PI network; prediction marginalizes over the training PI bank.

    Fit approximates the label distribution conditioned on features and PI;
    inference averages softmax outputs over PI rows drawn from the stored
    bank (exhaustively when the sample budget covers the bank).
    """

    def __init__(self, hidden=(64, 64), repr_dim=64, tower_width=64,
                 config=TrainConfig(), mc_samples=1000, mc_val_samples=64,
                 mc_trace_samples=32, val_mode="marginal", label_smoothing=0.0,
                 n_classes=None):
        self.hidden = hidden
        self.repr_dim = repr_dim
        self.tower_width = tower_width
        self.config = config
        self.mc_samples = mc_samples
        self.mc_val_samples = mc_val_samples
        self.mc_trace_samples = mc_trace_samples
        self.val_mode = val_mode
        self.label_smoothing = label_smoothing
        self.n_classes = n_classes

    def fit(self, X, y, pi=None, y_clean=None, val=None, val_pi=None, eval_set=None):
        if self.val_mode not in ("marginal", "direct"):
            raise ValueError("val_mode must be 'marginal' or 'direct'")
        parts = self._check_fit_args(X, y, y_clean, val, eval_set, self.n_classes)
        X, y, k = parts["X"], parts["y"], parts["n_classes"]
        pi_data = check_pi(pi, len(X))
        net = PINet.build(
            MLPSpec(X.shape[1], tuple(self.hidden), self.repr_dim),
            PITowerSpec(pi_data.shape[1], self.tower_width),
            k,
            rng_stream(self.config.seed, "init"),
        )
        self.net_ = net
        self.bank_ = pi_data
        if self.val_mode == "direct":
            if parts.get("val") is not None and val_pi is None:
                raise ValueError("val_mode='direct' needs val_pi")
            self._val_pi = None if val_pi is None else check_pi(val_pi, len(parts["val"][0]))
        if self.label_smoothing:
            targets = smooth_targets(y, k, self.label_smoothing)
        else:
            targets = one_hot(y, k)

        def batch_step(batch, lr):
            tape = Tape()
            loss = net.loss(tape, X[batch], pi_data[batch], targets[batch])
            accumulate_param_grads(tape, backward(tape, loss), net.store)
            _sgd(net.store, self.config, lr)
            return float(loss.value[0, 0])

        self._epoch = 0

        def train_predictions():
            pi_pred = net.logits_direct(X, pi_data).argmax(axis=1)
            rng = rng_stream(self.config.seed, "mc_trace", self._epoch)
            marginal = marginal_predict(net, X, self.bank_, self.mc_trace_samples, rng)
            return pi_pred, marginal.argmax(axis=1)

        base_evaluate = self._evaluate_factory(parts, train_predictions)

        def evaluate(epoch, lr, train_loss):
            self._epoch = epoch
            return base_evaluate(epoch, lr, train_loss)

        history, selected = run_training_loop(self.config, net.store, len(X),
                                              batch_step, evaluate)
        return self._finalize_fit(parts, history, selected)

    def _predict_labels(self, X) -> np.ndarray:
        if self.val_mode == "direct" and getattr(self, "_val_pi", None) is not None \
                and len(X) == len(self._val_pi):
            return self.net_.logits_direct(X, self._val_pi).argmax(axis=1)
        rng = rng_stream(self.config.seed, "mc_val", getattr(self, "_epoch", 0))
        samples = self.mc_val_samples
        return marginal_predict(self.net_, X, self.bank_, samples, rng).argmax(axis=1)

    def predict_proba(self, X, n_samples=None, rng=None) -> np.ndarray:
        if rng is None:
            rng = rng_stream(self.config.seed, "mc_predict")
        samples = self.mc_samples if n_samples is None else n_samples
        return marginal_predict(self.net_, check_features(X), self.bank_, samples, rng)


class SOPClassifier(_NoisyLabelClassifier):
    """Plain network plus per-example residual logits during training.

    The residual u*u - v*v absorbs sparse label noise through the implicit
    bias of SGD on this parameterization; residuals are indexed by training
    example and discarded at prediction time. Starting from a warm store
    continues training an already-fitted extractor and head.
    """

    def __init__(self, hidden=(64, 64), repr_dim=64, config=TrainConfig(),
                 init_store=None, n_classes=None):
        self.hidden = hidden
        self.repr_dim = repr_dim
        self.config = config
        self.init_store = init_store
        self.n_classes = n_classes

    def fit(self, X, y, y_clean=None, val=None, eval_set=None):
        parts = self._check_fit_args(X, y, y_clean, val, eval_set, self.n_classes)
        X, y, k = parts["X"], parts["y"], parts["n_classes"]
        spec = MLPSpec(X.shape[1], tuple(self.hidden), self.repr_dim)
        init_rng = rng_stream(self.config.seed, "init")
        if self.init_store is not None:
            net = PlainNet(extractor=spec, n_classes=k, store=self.init_store.copy())
        else:
            net = PlainNet.build(spec, k, init_rng)
        init_sop_residuals(net.store, len(X), k, rng_stream(self.config.seed, "sop_init"))
        self.net_ = net
        targets = one_hot(y, k)

        def batch_step(batch, lr):
            tape = Tape()
            logits = net.logits_node(tape, X[batch])
            u_rows = tape.param_rows(net.store, "sop/u", batch)
            v_rows = tape.param_rows(net.store, "sop/v", batch)
            adjusted = sop_logits(tape, logits, u_rows, v_rows)
            loss = cross_entropy(tape, adjusted, targets[batch])
            accumulate_param_grads(tape, backward(tape, loss), net.store)
            _sgd(net.store, self.config, lr)
            return float(loss.value[0, 0])

        evaluate = self._evaluate_factory(
            parts, lambda: (None, net.logits(X).argmax(axis=1)))
        history, selected = run_training_loop(self.config, net.store, len(X),
                                              batch_step, evaluate)
        self.residuals_ = sop_residual_values(net.store)
        return self._finalize_fit(parts, history, selected)

    def predict_proba(self, X) -> np.ndarray:
        return softmax_rows(self.net_.logits(check_features(X)))


class DistilledClassifier(_NoisyLabelClassifier):
    """Two-stage distillation: frozen teacher, soft-target student.

    The teacher is trained first (with the PI tower when ``teacher_uses_pi``,
    otherwise the same plain architecture as the student); its
    temperature-softened outputs on the training examples become the
    student's targets. The student never sees privileged features.
    """

    def __init__(self, teacher_uses_pi=True, tau=2.0, hidden=(64, 64), repr_dim=64,
                 tower_width=64, config=TrainConfig(), n_classes=None):
        self.teacher_uses_pi = teacher_uses_pi
        self.tau = tau
        self.hidden = hidden
        self.repr_dim = repr_dim
        self.tower_width = tower_width
        self.config = config
        self.n_classes = n_classes

    def fit(self, X, y, pi=None, y_clean=None, val=None, val_pi=None, eval_set=None):
        if self.tau <= 0:
            raise ValueError(f"distillation temperature must be > 0, got {self.tau}")
        teacher_config = self.config.with_(seed=self.config.seed + 1)
        if self.teacher_uses_pi:
            teacher = PIMarginalClassifier(
                hidden=self.hidden, repr_dim=self.repr_dim,
                tower_width=self.tower_width, config=teacher_config,
                val_mode="direct", n_classes=self.n_classes)
            teacher.fit(X, y, pi=pi, y_clean=y_clean, val=val, val_pi=val_pi,
                        eval_set=eval_set)
            teacher_logits = teacher.net_.logits_direct(
                check_features(X), check_pi(pi, len(X)))
        else:
            teacher = PlainClassifier(hidden=self.hidden, repr_dim=self.repr_dim,
                                      config=teacher_config, n_classes=self.n_classes)
            teacher.fit(X, y, y_clean=y_clean, val=val, eval_set=eval_set)
            teacher_logits = teacher.net_.logits(check_features(X))
        self.teacher_ = teacher
        soft = distill_targets(teacher_logits, self.tau)
        student = PlainClassifier(hidden=self.hidden, repr_dim=self.repr_dim,
                                  config=self.config, n_classes=self.n_classes)
        student.fit(X, y, y_clean=y_clean, val=val, eval_set=eval_set,
                    soft_targets=soft)
        self.student_ = student
        self.net_ = student.net_
        self.classes_ = student.classes_
        self.n_features_in_ = student.n_features_in_
        self.history_ = student.history_
        self.selected_epoch_ = student.selected_epoch_
        self.val_accuracy_ = student.val_accuracy_
        self.test_accuracy_ = student.test_accuracy_
        return self

    def predict_proba(self, X) -> np.ndarray:
        return self.student_.predict_proba(X)
