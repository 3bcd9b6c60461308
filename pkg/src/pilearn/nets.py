"""Network assembly: feature extractor, PI tower, heads, and residual logits.

All architectures are small relu perceptrons built on the autodiff tape. The
central object is :class:`TwoHeadNet`, which wires a shared feature extractor
into a PI head (which sees both the representation and the privileged
features) and a plain head (which sees the representation only, behind a
stop-gradient during joint training). Dropping the plain head gives the
single-head PI network used for marginalized prediction and for the
PI-distillation teacher.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, ParamStore, Tape, cross_entropy

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MLPSpec:
    """Feature extractor: input -> relu hidden layers -> relu representation."""

    in_dim: int
    hidden: tuple[int, ...] = (64,)
    repr_dim: int = 64

    def __post_init__(self):
        if len(self.hidden) < 1:
            raise ValueError("feature extractor needs at least one hidden layer")
        if min((self.in_dim,) + self.hidden + (self.repr_dim,)) < 1:
            raise ValueError("all layer widths must be >= 1")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.in_dim,) + self.hidden + (self.repr_dim,)


@dataclass(frozen=True)
class PITowerSpec:
    """PI tower: dense width ``width`` throughout, consuming ``pi_dim`` features."""

    pi_dim: int
    width: int = 64

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("tower width must be >= 1")
        if self.pi_dim < 1:
            raise ValueError("pi_dim must be >= 1")


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_extractor(store: ParamStore, spec: MLPSpec, rng: np.random.Generator,
                   prefix: str = "extractor") -> None:
    widths = spec.widths
    for i in range(len(widths) - 1):
        store.register(f"{prefix}/w{i}", he_uniform(rng, widths[i], widths[i + 1]))
        store.register(f"{prefix}/b{i}", np.zeros((1, widths[i + 1])), weight_decay=False)


def extractor_forward(tape: Tape, store: ParamStore, spec: MLPSpec, x: Node,
                      prefix: str = "extractor") -> Node:
    h = x
    for i in range(len(spec.widths) - 1):
        pre = tape.add_bias(tape.matmul(h, tape.param(store, f"{prefix}/w{i}")),
                            tape.param(store, f"{prefix}/b{i}"))
        h = tape.relu(pre)
    return h


def init_linear_head(store: ParamStore, in_dim: int, n_classes: int,
                     rng: np.random.Generator, prefix: str) -> None:
    store.register(f"{prefix}/w", he_uniform(rng, in_dim, n_classes))
    store.register(f"{prefix}/b", np.zeros((1, n_classes)), weight_decay=False)


def linear_forward(tape: Tape, store: ParamStore, x: Node, prefix: str) -> Node:
    return tape.add_bias(tape.matmul(x, tape.param(store, f"{prefix}/w")),
                         tape.param(store, f"{prefix}/b"))


def init_pi_tower(store: ParamStore, tower: PITowerSpec, repr_dim: int, n_classes: int,
                  rng: np.random.Generator, prefix: str = "pi_tower") -> None:
    w = tower.width
    store.register(f"{prefix}/w_pi", he_uniform(rng, tower.pi_dim, w))
    store.register(f"{prefix}/b_pi", np.zeros((1, w)), weight_decay=False)
    store.register(f"{prefix}/w_joint", he_uniform(rng, w + repr_dim, w))
    store.register(f"{prefix}/b_joint", np.zeros((1, w)), weight_decay=False)
    init_linear_head(store, w + repr_dim, n_classes, rng, f"{prefix}/out")


def pi_tower_forward(tape: Tape, store: ParamStore, tower: PITowerSpec,
                     repr_node: Node, pi_node: Node, prefix: str = "pi_tower") -> Node:
    """PI-head logits from a representation and a privileged-feature block.

    Wiring: dense+relu on the PI features; concatenate with the
    representation; dense+relu to the joint space; residual connection back
    to the PI branch; concatenate the result with the representation again;
    linear classifier. Zeroed PI therefore does not zero the logits: the
    representation reaches the classifier through both concatenations.
    """
    if pi_node.shape[1] != tower.pi_dim:
        raise ValueError(
            f"PI width {pi_node.shape[1]} does not match tower spec {tower.pi_dim}")
    pi_h = tape.relu(tape.add_bias(tape.matmul(pi_node, tape.param(store, f"{prefix}/w_pi")),
                                   tape.param(store, f"{prefix}/b_pi")))
    joint = tape.concat_cols(pi_h, repr_node)
    joint_h = tape.relu(tape.add_bias(tape.matmul(joint, tape.param(store, f"{prefix}/w_joint")),
                                      tape.param(store, f"{prefix}/b_joint")))
    residual = tape.add(joint_h, pi_h)
    features = tape.concat_cols(residual, repr_node)
    return linear_forward(tape, store, features, f"{prefix}/out")


@dataclass
class TwoHeadNet:
    """Shared extractor with a PI head and a plain (no-PI) head.

    During joint training the plain head consumes the representation only
    through a stop-gradient node, so the extractor is updated exclusively by
    gradients from the PI head; the plain-head loss is weighted by
    ``loss_weight``. Prediction always goes through the plain head and is
    therefore independent of the privileged features.
    """

    extractor: MLPSpec
    tower: PITowerSpec
    n_classes: int
    loss_weight: float = 1.0
    store: ParamStore = field(default_factory=ParamStore)

    @classmethod
    def build(cls, extractor: MLPSpec, tower: PITowerSpec, n_classes: int,
              rng: np.random.Generator, loss_weight: float = 1.0) -> "TwoHeadNet":
        net = cls(extractor=extractor, tower=tower, n_classes=n_classes,
                  loss_weight=loss_weight)
        init_extractor(net.store, extractor, rng)
        init_pi_tower(net.store, tower, extractor.repr_dim, n_classes, rng)
        init_linear_head(net.store, extractor.repr_dim, n_classes, rng, "plain_head")
        return net

    def forward_train(self, tape: Tape, x: np.ndarray, pi: np.ndarray) -> tuple[Node, Node]:
        """(PI-head logits, plain-head logits) with stop-gradient routing."""
        if pi is None:
            raise ValueError("privileged features are required at training time")
        x_node = tape.leaf(x)
        repr_node = extractor_forward(tape, self.store, self.extractor, x_node)
        logits_pi = pi_tower_forward(tape, self.store, self.tower, repr_node, tape.leaf(pi))
        blocked = tape.stop_gradient(repr_node)
        logits_plain = linear_forward(tape, self.store, blocked, "plain_head")
        return logits_pi, logits_plain

    def joint_loss(self, tape: Tape, x: np.ndarray, pi: np.ndarray,
                   targets: np.ndarray) -> tuple[Node, Node, Node]:
        logits_pi, logits_plain = self.forward_train(tape, x, pi)
        loss_pi = cross_entropy(tape, logits_pi, targets)
        loss_plain = cross_entropy(tape, logits_plain, targets)
        loss = tape.add(loss_pi, tape.scale(loss_plain, self.loss_weight))
        return loss, logits_pi, logits_plain

    def plain_logits(self, x: np.ndarray) -> np.ndarray:
        """Inference path: plain head only, no privileged features."""
        tape = Tape()
        repr_node = extractor_forward(tape, self.store, self.extractor, tape.leaf(x))
        return linear_forward(tape, self.store, repr_node, "plain_head").value

    def pi_logits(self, x: np.ndarray, pi: np.ndarray) -> np.ndarray:
        tape = Tape()
        repr_node = extractor_forward(tape, self.store, self.extractor, tape.leaf(x))
        return pi_tower_forward(tape, self.store, self.tower, repr_node, tape.leaf(pi)).value

    def param_counts(self) -> dict[str, int]:
        """Exact split of the parameter count along the ablation axes."""
        counts = {
            "feature_extractor": self.store.n_params("extractor/"),
            "pi_pathway": self.store.n_params("pi_tower/"),
            "plain_head": self.store.n_params("plain_head/"),
        }
        counts["total"] = sum(counts.values())
        return counts


@dataclass
class PINet:
    """Single-head network on (x, privileged features): the marginalization
    and PI-teacher architecture."""

    extractor: MLPSpec
    tower: PITowerSpec
    n_classes: int
    store: ParamStore = field(default_factory=ParamStore)

    @classmethod
    def build(cls, extractor: MLPSpec, tower: PITowerSpec, n_classes: int,
              rng: np.random.Generator) -> "PINet":
        net = cls(extractor=extractor, tower=tower, n_classes=n_classes)
        init_extractor(net.store, extractor, rng)
        init_pi_tower(net.store, tower, extractor.repr_dim, n_classes, rng)
        return net

    def loss(self, tape: Tape, x: np.ndarray, pi: np.ndarray, targets: np.ndarray) -> Node:
        logits = self.logits_node(tape, x, pi)
        return cross_entropy(tape, logits, targets)

    def logits_node(self, tape: Tape, x: np.ndarray, pi: np.ndarray) -> Node:
        repr_node = extractor_forward(tape, self.store, self.extractor, tape.leaf(x))
        return pi_tower_forward(tape, self.store, self.tower, repr_node, tape.leaf(pi))

    def logits_direct(self, x: np.ndarray, pi: np.ndarray) -> np.ndarray:
        """Conditional logits on (x, a) pairs, no marginalization."""
        return self.logits_node(Tape(), x, pi).value

    def representation(self, x: np.ndarray) -> np.ndarray:
        tape = Tape()
        return extractor_forward(tape, self.store, self.extractor, tape.leaf(x)).value

    def tower_logits_from_repr(self, repr_values: np.ndarray, pi: np.ndarray) -> np.ndarray:
        """Tower pass on a precomputed representation (marginalization fast path)."""
        tape = Tape()
        return pi_tower_forward(tape, self.store, self.tower,
                                tape.leaf(repr_values), tape.leaf(pi)).value

    def param_counts(self) -> dict[str, int]:
        counts = {
            "feature_extractor": self.store.n_params("extractor/"),
            "pi_pathway": self.store.n_params("pi_tower/"),
        }
        counts["total"] = sum(counts.values())
        return counts


@dataclass
class PlainNet:
    """Extractor plus a single linear head; the no-PI baseline architecture."""

    extractor: MLPSpec
    n_classes: int
    store: ParamStore = field(default_factory=ParamStore)

    @classmethod
    def build(cls, extractor: MLPSpec, n_classes: int, rng: np.random.Generator) -> "PlainNet":
        net = cls(extractor=extractor, n_classes=n_classes)
        init_extractor(net.store, extractor, rng)
        init_linear_head(net.store, extractor.repr_dim, n_classes, rng, "plain_head")
        return net

    def logits_node(self, tape: Tape, x: np.ndarray) -> Node:
        repr_node = extractor_forward(tape, self.store, self.extractor, tape.leaf(x))
        return linear_forward(tape, self.store, repr_node, "plain_head")

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.logits_node(Tape(), x).value

    def loss(self, tape: Tape, x: np.ndarray, targets: np.ndarray) -> Node:
        return cross_entropy(tape, self.logits_node(tape, x), targets)


def marginal_predict(net: PINet, x: np.ndarray, pi_bank: np.ndarray, n_samples: int,
                     rng: np.random.Generator, chunk_pairs: int = 200_000) -> np.ndarray:
    """Marginalize the PI network's prediction over an empirical PI bank.

    Averages softmax outputs over PI rows drawn uniformly (with replacement,
    independently per example) from the bank. When ``n_samples`` covers the
    bank, every bank row is enumerated exactly once instead.

    The tower wiring is bilinear in (representation, PI row) up to the two
    relu joints, so each branch is pushed through its dense layers once per
    unique input and only the cheap joint (relu, residual, output head) is
    evaluated per (example, sample) pair.
    """
    bank = np.asarray(pi_bank, dtype=np.float64)
    if bank.ndim != 2 or len(bank) == 0:
        raise ValueError("PI bank must be a nonempty 2-D array")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    store = net.store
    reprs = net.representation(np.asarray(x, dtype=np.float64))
    n = len(reprs)
    exhaustive = n_samples >= len(bank)
    m = len(bank) if exhaustive else n_samples
    w = net.tower.width
    k = net.n_classes

    # per-bank-row tower branch
    pi_h = np.maximum(bank @ store.values["pi_tower/w_pi"]
                      + store.values["pi_tower/b_pi"], 0.0)
    w_joint = store.values["pi_tower/w_joint"]
    joint_from_pi = pi_h @ w_joint[:w] + store.values["pi_tower/b_joint"]
    w_out = store.values["pi_tower/out/w"]
    out_from_pi = pi_h @ w_out[:w]  # residual path reuses pi_h directly

    # per-example branch
    joint_from_repr = reprs @ w_joint[w:]
    out_from_repr = reprs @ w_out[w:] + store.values["pi_tower/out/b"]

    out = np.empty((n, k))
    per_chunk = max(1, chunk_pairs // m)
    for start in range(0, n, per_chunk):
        end = min(n, start + per_chunk)
        rows = end - start
        if exhaustive:
            joint = np.broadcast_to(joint_from_pi, (rows, m, w)).copy()
        else:
            samples = rng.integers(0, len(bank), size=(rows, m))
            joint = joint_from_pi[samples]
        joint += joint_from_repr[start:end, None, :]
        np.maximum(joint, 0.0, out=joint)
        logits = (joint.reshape(-1, w) @ w_out[:w]).reshape(rows, m, k)
        del joint
        if exhaustive:
            logits += out_from_pi[None, :, :]
        else:
            logits += out_from_pi[samples]
        logits += out_from_repr[start:end, None, :]
        flat = logits.reshape(-1, k)
        flat -= flat.max(axis=1, keepdims=True)
        np.exp(flat, out=flat)
        flat /= flat.sum(axis=1, keepdims=True)
        out[start:end] = logits.mean(axis=1)
    return out


# -- per-example residual logits ---------------------------------------------

SOP_INIT_SCALE = 1e-4


def init_sop_residuals(store: ParamStore, n_examples: int, n_classes: int,
                       rng: np.random.Generator) -> None:
    """Register the per-example residual parameter pairs.

    Initialized at a tiny random magnitude rather than exactly zero: the
    residual gradient is proportional to the parameter itself, so an exact
    zero is a fixed point the optimizer can never leave. At this scale the
    initial residual contribution (~1e-8) is numerically negligible.
    """
    store.register("sop/u", rng.normal(0.0, SOP_INIT_SCALE, size=(n_examples, n_classes)),
                   weight_decay=False)
    store.register("sop/v", rng.normal(0.0, SOP_INIT_SCALE, size=(n_examples, n_classes)),
                   weight_decay=False)


def sop_logits(tape: Tape, logits: Node, u_rows: Node, v_rows: Node) -> Node:
    """logits + u*u - v*v, elementwise over the batch rows (train-time only)."""
    if u_rows.shape != logits.shape or v_rows.shape != logits.shape:
        raise ValueError(
            f"residual rows {u_rows.shape}/{v_rows.shape} do not match logits {logits.shape}")
    u_sq = tape.elementwise_mul(u_rows, u_rows)
    v_sq = tape.elementwise_mul(v_rows, v_rows)
    return tape.add(logits, tape.add(u_sq, tape.scale(v_sq, -1.0)))


def sop_residual_values(store: ParamStore) -> np.ndarray:
    u = store.values["sop/u"]
    v = store.values["sop/v"]
    return u * u - v * v


# -- soft targets -------------------------------------------------------------

def distill_targets(teacher_logits: np.ndarray, tau: float) -> np.ndarray:
    """Temperature-softened teacher probabilities, treated as constants."""
    if tau <= 0:
        raise ValueError(f"distillation temperature must be > 0, got {tau}")
    z = np.asarray(teacher_logits, dtype=np.float64) / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def smooth_targets(labels: np.ndarray, n_classes: int, eps: float) -> np.ndarray:
    """(1 - eps) * one-hot + eps / K."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {eps}")
    out = np.full((len(labels), n_classes), eps / n_classes)
    out[np.arange(len(labels)), np.asarray(labels, dtype=int)] += 1.0 - eps
    return out


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels outside [0, {n_classes})")
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# -- checkpoints ---------------------------------------------------------------

def save_params(store: ParamStore, path) -> None:
    """Flat named-array archive (.npz) with a format version marker."""
    arrays = {f"param/{name}": value for name, value in store.values.items()}
    arrays["format_version"] = np.array([CHECKPOINT_FORMAT_VERSION])
    decayed = sorted(name for name, flag in store.weight_decay.items() if flag)
    arrays["weight_decay_names"] = np.array(decayed, dtype="U")
    np.savez(path, **arrays)


def load_params(path) -> ParamStore:
    with np.load(path) as archive:
        version = int(archive["format_version"][0])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        decayed = set(archive["weight_decay_names"].tolist())
        store = ParamStore()
        for key in archive.files:
            if key.startswith("param/"):
                name = key[len("param/"):]
                store.register(name, archive[key], weight_decay=name in decayed)
    return store
