"""Dense network with batch normalization and a hand-written backward pass.

Architecture: ``Linear -> BN -> ReLU`` per hidden layer, then a final
``Linear`` to the class logits. Inputs are row-major, ``(n, input_dim)``.

Three forward modes control how BN layers normalize:

``eval``
    stored running statistics, nothing mutated.
``batch_stats``
    statistics of the current batch, nothing mutated (loss evaluation,
    finite differences).
``adapt_stats``
    statistics of the current batch, and the running statistics are
    moved toward them with momentum ``alpha``:
    ``mean <- (1 - alpha) * mean + alpha * batch_mean`` and likewise for
    the (population) variance.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateVarianceError,
    DomainError,
    NumericError,
    ShapeError,
    UsageError,
)

ROLES = ("weight", "bias", "gamma", "beta", "run_mean", "run_var")
TRAINABLE_ROLES = frozenset({"weight", "bias", "gamma", "beta"})
BN_AFFINE_ROLES = frozenset({"gamma", "beta"})
STAT_ROLES = frozenset({"run_mean", "run_var"})
MODES = ("eval", "batch_stats", "adapt_stats")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if int(self.input_dim) < 1:
            raise ConfigurationError("must be a positive integer", key="model.input_dim")
        if not self.hidden_dims:
            raise ConfigurationError("at least one hidden (BN) layer is required",
                                     key="model.hidden_dims")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigurationError("widths must be positive", key="model.hidden_dims")
        if int(self.num_classes) < 2:
            raise ConfigurationError("need at least 2 classes", key="model.num_classes")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ConfigurationError("must lie strictly between 0 and 1", key="model.bn_momentum")
        if not self.bn_epsilon > 0.0:
            raise ConfigurationError("must be positive", key="model.bn_epsilon")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    def layout(self) -> tuple["Segment", ...]:
        """Canonical segment order used by flatten/unflatten."""
        segments = []
        for layer, (fan_in, fan_out) in enumerate(self.layer_dims):
            segments.append(Segment(layer, "weight", (fan_in, fan_out)))
            segments.append(Segment(layer, "bias", (fan_out,)))
            if layer < len(self.hidden_dims):
                for role in ("gamma", "beta", "run_mean", "run_var"):
                    segments.append(Segment(layer, role, (fan_out,)))
        return tuple(segments)


@dataclass(frozen=True)
class Segment:
    layer: int
    role: str
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class Model:
    spec: ModelSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gamma: list[np.ndarray]
    beta: list[np.ndarray]
    running_mean: list[np.ndarray]
    running_var: list[np.ndarray]

    def copy(self) -> "Model":
        return unflatten(self.spec, flatten(self))

    def digest(self) -> str:
        return hashlib.sha256(flatten(self).values.tobytes()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Model):
            return NotImplemented
        a, b = flatten(self), flatten(other)
        return self.spec == other.spec and np.array_equal(a.values, b.values)


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ShapeError(f"inputs must be a non-empty 2-D array, got shape {self.inputs.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise ShapeError("labels must have one entry per input row")
            if self.labels.size and self.labels.min() < 0:
                raise ShapeError("labels must be non-negative class ids")

    def __len__(self):
        return self.inputs.shape[0]


class ParamVector:
    """Flat parameter values plus the segment layout describing them."""

    def __init__(self, values, layout):
        self.values = np.asarray(values, dtype=np.float64)
        self.layout = tuple(layout)
        expected = sum(s.size for s in self.layout)
        if self.values.ndim != 1 or self.values.size != expected:
            raise ShapeError(f"layout describes {expected} values, got {self.values.size}")

    def __len__(self):
        return self.values.size

    def __repr__(self):
        return f"ParamVector(n={self.values.size}, segments={len(self.layout)})"

    def same_layout(self, other: "ParamVector") -> bool:
        return [(s.layer, s.role, s.size) for s in self.layout] == [
            (s.layer, s.role, s.size) for s in other.layout
        ]

    def role_mask(self, roles) -> np.ndarray:
        mask = np.zeros(self.values.size, dtype=bool)
        offset = 0
        for seg in self.layout:
            if seg.role in roles:
                mask[offset:offset + seg.size] = True
            offset += seg.size
        return mask

    def trainable_mask(self) -> np.ndarray:
        return self.role_mask(TRAINABLE_ROLES)

    def segments(self):
        """Yield ``(segment, view)`` pairs in layout order."""
        offset = 0
        for seg in self.layout:
            yield seg, self.values[offset:offset + seg.size]
            offset += seg.size

    def to_bytes(self) -> bytes:
        # header: u32 segment count, then per segment (u8 role tag, u64 length);
        # payload: little-endian float64 values
        parts = [struct.pack("<I", len(self.layout))]
        for seg in self.layout:
            parts.append(struct.pack("<BQ", ROLES.index(seg.role), seg.size))
        parts.append(self.values.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamVector":
        vec, used = cls.read_from(data, 0)
        if used != len(data):
            raise ShapeError(f"{len(data) - used} trailing bytes after parameter payload")
        return vec

    @classmethod
    def read_from(cls, data: bytes, offset: int) -> tuple["ParamVector", int]:
        """Decode one vector starting at ``offset``; return it and the end offset."""
        try:
            (count,) = struct.unpack_from("<I", data, offset)
            offset += 4
            layout = []
            layer = -1
            for _ in range(count):
                tag, length = struct.unpack_from("<BQ", data, offset)
                offset += struct.calcsize("<BQ")
                role = ROLES[tag]
                if role == "weight":
                    layer += 1
                layout.append(Segment(layer, role, (int(length),)))
            total = sum(s.size for s in layout)
            end = offset + 8 * total
            if end > len(data):
                raise ShapeError("parameter payload truncated")
            values = np.frombuffer(data, dtype="<f8", count=total, offset=offset).astype(np.float64)
        except (struct.error, IndexError) as exc:
            raise ShapeError(f"malformed parameter header: {exc}") from exc
        return cls(values, layout), end


# --------------------------------------------------------------------------
# construction and (de)serialization


def init_model(spec: ModelSpec, seed: int) -> Model:
    """He-uniform weights, zero biases, identity BN affine, unit running variance."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_dims:
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    hidden = spec.hidden_dims
    return Model(
        spec=spec,
        weights=weights,
        biases=biases,
        gamma=[np.ones(h) for h in hidden],
        beta=[np.zeros(h) for h in hidden],
        running_mean=[np.zeros(h) for h in hidden],
        running_var=[np.ones(h) for h in hidden],
    )


def _model_array(model: Model, seg: Segment) -> np.ndarray:
    table = {
        "weight": model.weights,
        "bias": model.biases,
        "gamma": model.gamma,
        "beta": model.beta,
        "run_mean": model.running_mean,
        "run_var": model.running_var,
    }
    return table[seg.role][seg.layer]


def flatten(model: Model) -> ParamVector:
    layout = model.spec.layout()
    values = np.concatenate([_model_array(model, seg).ravel() for seg in layout])
    return ParamVector(values, layout)


def unflatten(spec: ModelSpec, params: ParamVector) -> Model:
    layout = spec.layout()
    expected = [(s.layer, s.role, s.size) for s in layout]
    got = [(s.layer, s.role, s.size) for s in params.layout]
    if expected != got:
        raise ShapeError("parameter layout does not match the model spec")
    n_layers = len(spec.layer_dims)
    n_hidden = len(spec.hidden_dims)
    arrays = {role: [None] * (n_layers if role in ("weight", "bias") else n_hidden) for role in ROLES}
    offset = 0
    for seg in layout:
        arrays[seg.role][seg.layer] = params.values[offset:offset + seg.size].reshape(seg.shape).copy()
        offset += seg.size
    return Model(
        spec=spec,
        weights=arrays["weight"],
        biases=arrays["bias"],
        gamma=arrays["gamma"],
        beta=arrays["beta"],
        running_mean=arrays["run_mean"],
        running_var=arrays["run_var"],
    )


# --------------------------------------------------------------------------
# probabilities


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max-shift stabilization. Accepts 1-D or 2-D input."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax input contains non-finite values")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def entropy(p, atol: float = 1e-8):
    """Shannon entropy in nats; ``0 log 0`` counts as 0. Row-wise for 2-D input."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise DomainError("probability vector has a negative component")
    if not np.allclose(p.sum(axis=-1), 1.0, atol=atol):
        raise DomainError("probability vector does not sum to 1")
    safe = np.where(p > 0, p, 1.0)
    h = -(p * np.log(safe)).sum(axis=-1)
    return np.maximum(h, 0.0)


def _entropy_from_logits(logits: np.ndarray) -> np.ndarray:
    logp = log_softmax(logits)
    return -(np.exp(logp) * logp).sum(axis=1)


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    mode: str
    inputs: list[np.ndarray] = field(default_factory=list)   # input to each Linear
    xhat: list[np.ndarray] = field(default_factory=list)
    inv_std: list[np.ndarray] = field(default_factory=list)
    active: list[np.ndarray] = field(default_factory=list)   # ReLU pass-through mask
    logits: np.ndarray | None = None


def _as_inputs(batch) -> np.ndarray:
    if isinstance(batch, Batch):
        return batch.inputs
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"inputs must be 2-D, got shape {x.shape}")
    return x


def forward(model: Model, batch, mode: str = "eval", cache: bool = False):
    """Compute logits ``(n, K)``. With ``cache=True`` return ``(logits, ForwardCache)``."""
    if mode not in MODES:
        raise UsageError(f"unknown forward mode {mode!r}")
    x = _as_inputs(batch)
    spec = model.spec
    if x.shape[1] != spec.input_dim:
        raise ShapeError(f"expected {spec.input_dim} input features, got {x.shape[1]}")
    n = x.shape[0]
    if mode != "eval" and n < 2:
        raise DegenerateVarianceError("batch statistics need at least 2 samples")
    alpha, eps = spec.bn_momentum, spec.bn_epsilon
    record = ForwardCache(mode) if cache else None

    h = x
    for layer in range(len(spec.hidden_dims)):
        z = h @ model.weights[layer] + model.biases[layer]
        if mode == "eval":
            mu, var = model.running_mean[layer], model.running_var[layer]
        else:
            mu = z.mean(axis=0)
            var = ((z - mu) ** 2).mean(axis=0)
            if mode == "adapt_stats":
                model.running_mean[layer] = (1.0 - alpha) * model.running_mean[layer] + alpha * mu
                model.running_var[layer] = (1.0 - alpha) * model.running_var[layer] + alpha * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (z - mu) * inv_std
        y = model.gamma[layer] * xhat + model.beta[layer]
        active = y > 0
        if record is not None:
            record.inputs.append(h)
            record.xhat.append(xhat)
            record.inv_std.append(inv_std)
            record.active.append(active)
        h = np.where(active, y, 0.0)

    logits = h @ model.weights[-1] + model.biases[-1]
    if record is not None:
        record.inputs.append(h)
        record.logits = logits
        return logits, record
    return logits


def penultimate(model: Model, batch) -> np.ndarray:
    """Eval-mode activations feeding the output layer."""
    _, record = forward(model, batch, "eval", cache=True)
    return record.inputs[-1]


def backward(model: Model, record: ForwardCache, dlogits: np.ndarray) -> ParamVector:
    """Back-propagate ``dL/dlogits`` through the cached pass.

    In batch-statistic modes the gradient flows through the batch mean and
    variance; in ``eval`` mode the stored statistics are constants.
    Running-statistic segments of the result are zero.
    """
    if record is None or record.logits is None:
        raise UsageError("backward needs the cache of a forward pass")
    spec = model.spec
    n_hidden = len(spec.hidden_dims)
    grads = {}

    h = record.inputs[-1]
    grads[(n_hidden, "weight")] = h.T @ dlogits
    grads[(n_hidden, "bias")] = dlogits.sum(axis=0)
    dh = dlogits @ model.weights[-1].T

    for layer in reversed(range(n_hidden)):
        dy = np.where(record.active[layer], dh, 0.0)
        xhat = record.xhat[layer]
        grads[(layer, "gamma")] = (dy * xhat).sum(axis=0)
        grads[(layer, "beta")] = dy.sum(axis=0)
        dxhat = dy * model.gamma[layer]
        inv_std = record.inv_std[layer]
        if record.mode == "eval":
            dz = dxhat * inv_std
        else:
            n = xhat.shape[0]
            dz = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        a = record.inputs[layer]
        grads[(layer, "weight")] = a.T @ dz
        grads[(layer, "bias")] = dz.sum(axis=0)
        dh = dz @ model.weights[layer].T

    layout = spec.layout()
    values = np.concatenate([
        grads[(s.layer, s.role)].ravel() if s.role in TRAINABLE_ROLES else np.zeros(s.size)
        for s in layout
    ])
    return ParamVector(values, layout)


def entropy_loss(model: Model, batch, mode: str = "batch_stats") -> float:
    """Mean prediction entropy over the batch. Never mutates the model."""
    if mode == "adapt_stats":
        mode = "batch_stats"
    logits = forward(model, batch, mode)
    return float(_entropy_from_logits(logits).mean())


def entropy_grad_logits(logits: np.ndarray) -> np.ndarray:
    """d(mean entropy)/d logits: ``-p * (log p + H) / n`` row-wise."""
    logp = log_softmax(logits)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1, keepdims=True)
    return -p * (logp + h) / logits.shape[0]


def backward_entropy(model: Model, record: ForwardCache) -> ParamVector:
    """Gradient of the mean-entropy loss for the batch in ``record``."""
    if record is None or record.logits is None:
        raise UsageError("backward_entropy needs the cache of a forward pass on this batch")
    return backward(model, record, entropy_grad_logits(record.logits))


def cross_entropy_grad_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = softmax(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return p / logits.shape[0]


def sgd_step(params: ParamVector, grads: ParamVector, lr: float,
             roles=TRAINABLE_ROLES) -> ParamVector:
    """``params - lr * grads`` on the segments whose role is in ``roles``."""
    if not params.same_layout(grads):
        raise ShapeError("parameter and gradient layouts differ")
    if lr < 0:
        raise ConfigurationError("learning rate must be non-negative", key="lr")
    mask = params.role_mask(set(roles) & TRAINABLE_ROLES)
    values = params.values.copy()
    values[mask] -= lr * grads.values[mask]
    return ParamVector(values, params.layout)


def accuracy(model: Model, batch: Batch) -> float:
    if batch.labels is None:
        raise UsageError("accuracy needs labels")
    pred = np.argmax(forward(model, batch, "eval"), axis=1)
    return float(np.mean(pred == batch.labels))


def pretrain_source(model: Model, dataset: Batch, epochs: int = 30, lr: float = 0.1,
                    seed: int = 0, batch_size: int = 32) -> Model:
    """Supervised cross-entropy training with BN in ``adapt_stats`` mode.

    Returns a new model; the argument is left untouched.
    """
    if dataset.labels is None or len(dataset) == 0:
        raise ConfigurationError("pretraining needs a non-empty labeled dataset", key="dataset")
    if dataset.labels.max() >= model.spec.num_classes:
        raise ShapeError("label id exceeds num_classes")
    if len(dataset) < 2:
        raise ConfigurationError("pretraining needs at least 2 samples", key="dataset")
    trained = model.copy()
    if epochs <= 0:
        return trained
    rng = np.random.default_rng(seed)
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if idx.size < 2:
                continue
            logits, record = forward(trained, dataset.inputs[idx], "adapt_stats", cache=True)
            grads = backward(trained, record, cross_entropy_grad_logits(logits, dataset.labels[idx]))
            trained = unflatten(trained.spec, sgd_step(flatten(trained), grads, lr))
    recalibrate_stats(trained, dataset.inputs)
    return trained


def recalibrate_stats(model: Model, inputs) -> None:
    """Set every BN layer's running statistics to the exact statistics of ``inputs``."""
    h = _as_inputs(inputs)
    for layer in range(len(model.spec.hidden_dims)):
        z = h @ model.weights[layer] + model.biases[layer]
        mu = z.mean(axis=0)
        var = ((z - mu) ** 2).mean(axis=0)
        model.running_mean[layer] = mu
        model.running_var[layer] = var
        y = model.gamma[layer] * (z - mu) / np.sqrt(var + model.spec.bn_epsilon) + model.beta[layer]
        h = np.maximum(y, 0.0)
