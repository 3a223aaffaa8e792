"""Dense feature extractor with a linear classification head.

Everything is plain numpy with hand-written backprop. The extractor is a
stack of affine layers with tanh between them (none after the last layer,
so its output is the raw feature vector). The head maps features to
logits over the global class set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InputError, NumericalError, ProtocolError


@dataclass
class ClientModel:
    extractor: list[tuple[np.ndarray, np.ndarray]]  # (W: d_in x d_out, b: d_out)
    head_w: np.ndarray  # d_h x C_total
    head_b: np.ndarray  # C_total

    def __post_init__(self):
        if not self.extractor:
            raise ConfigurationError("extractor needs at least one layer")
        for i, (w, b) in enumerate(self.extractor):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigurationError(f"extractor layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[0] != self.extractor[i - 1][0].shape[1]:
                raise ConfigurationError(
                    f"extractor layer {i} expects {w.shape[0]} inputs, previous layer emits "
                    f"{self.extractor[i - 1][0].shape[1]}"
                )
        if self.head_w.ndim != 2 or self.head_w.shape[0] != self.d_h:
            raise ConfigurationError(f"head weight {self.head_w.shape} does not take d_h={self.d_h}")
        if self.head_b.shape != (self.head_w.shape[1],):
            raise ConfigurationError(f"head bias {self.head_b.shape} does not match {self.head_w.shape}")

    @property
    def input_dim(self) -> int:
        return self.extractor[0][0].shape[0]

    @property
    def d_h(self) -> int:
        return self.extractor[-1][0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[1]

    @property
    def head(self) -> tuple[np.ndarray, np.ndarray]:
        return self.head_w, self.head_b

    def parameters(self) -> list[np.ndarray]:
        """Flat, ordered list of parameter arrays: extractor layers then head."""
        out = []
        for w, b in self.extractor:
            out += [w, b]
        return out + [self.head_w, self.head_b]

    def with_parameters(self, params: Sequence[np.ndarray]) -> ClientModel:
        params = list(params)
        n = len(self.extractor)
        if len(params) != 2 * n + 2:
            raise ConfigurationError(f"expected {2 * n + 2} parameter arrays, got {len(params)}")
        layers = [(params[2 * i], params[2 * i + 1]) for i in range(n)]
        return ClientModel(layers, params[-2], params[-1])

    def extractor_parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in self.extractor)

    def parameter_count(self) -> int:
        return self.extractor_parameter_count() + self.head_w.size + self.head_b.size

    def layer_dims(self) -> list[tuple[int, int]]:
        return [w.shape for w, _ in self.extractor] + [self.head_w.shape]

    def copy(self) -> ClientModel:
        return self.with_parameters([p.copy() for p in self.parameters()])

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.parameters())


def init_model(layer_sizes: Sequence[int], n_classes: int, rng: np.random.Generator) -> ClientModel:
    """Glorot-uniform weights, zero biases.

    ``layer_sizes`` is ``[input_dim, hidden..., d_h]``.
    """
    if len(layer_sizes) < 2 or min(layer_sizes) < 1 or n_classes < 1:
        raise ConfigurationError(f"bad architecture {list(layer_sizes)} -> {n_classes}")
    dims = list(layer_sizes) + [n_classes]
    mats = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (d_in + d_out))
        mats.append((rng.uniform(-limit, limit, size=(d_in, d_out)), np.zeros(d_out)))
    head_w, head_b = mats.pop()
    return ClientModel(mats, head_w, head_b)


@dataclass
class FeatureAnchorSet:
    """One d_h-dimensional anchor per local class."""

    anchors: dict[int, np.ndarray]
    owner: int | None = None

    @property
    def classes(self) -> list[int]:
        return sorted(self.anchors)

    def __len__(self) -> int:
        return len(self.anchors)

    def __contains__(self, c: int) -> bool:
        return c in self.anchors

    def __getitem__(self, c: int) -> np.ndarray:
        try:
            return self.anchors[c]
        except KeyError:
            raise ProtocolError(f"client {self.owner} has no anchor for class {c}") from None

    def copy(self) -> FeatureAnchorSet:
        return FeatureAnchorSet({c: v.copy() for c, v in self.anchors.items()}, self.owner)

    def restricted_to(self, classes) -> FeatureAnchorSet:
        return FeatureAnchorSet({c: self.anchors[c].copy() for c in classes if c in self.anchors}, self.owner)

    def matrix(self) -> np.ndarray:
        return np.stack([self.anchors[c] for c in self.classes])


def init_anchors(classes, d_h: int, rng: np.random.Generator, owner: int | None = None) -> FeatureAnchorSet:
    return FeatureAnchorSet({int(c): rng.standard_normal(d_h) for c in sorted(classes)}, owner)


@dataclass(frozen=True)
class LocalTrainConfig:
    learning_rate: float = 0.05
    local_rounds: int = 5
    batch_size: int = 32
    lam: float = 1.0
    anchors_learnable: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigurationError(f"learning rate must be non-negative, got {self.learning_rate}")
        if self.local_rounds < 1:
            raise ConfigurationError(f"local_rounds must be >= 1, got {self.local_rounds}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lam >= 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class ForwardCache:
    layer_inputs: list[np.ndarray]  # input to each extractor layer
    pre_activations: list[np.ndarray]
    features: np.ndarray


def forward(model: ClientModel, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ConfigurationError(f"inputs of shape {x.shape} do not fit input_dim={model.input_dim}")
    layer_inputs, pre = [], []
    a = x
    last = len(model.extractor) - 1
    for i, (w, b) in enumerate(model.extractor):
        layer_inputs.append(a)
        z = a @ w + b
        pre.append(z)
        a = z if i == last else np.tanh(z)
    logits = a @ model.head_w + model.head_b
    return a, logits, ForwardCache(layer_inputs, pre, a)


def _check_labels(labels: np.ndarray, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n_rows,):
        raise InputError(f"expected {n_rows} labels, got shape {y.shape}")
    if n_rows and (y.min() < 0 or y.max() >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes}), got range [{y.min()}, {y.max()}]")
    return y.astype(int)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def supervised_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy."""
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    return float(-log_softmax(logits)[np.arange(len(y)), y].mean())


def _anchor_targets(labels: np.ndarray, anchors: FeatureAnchorSet) -> np.ndarray:
    return np.stack([anchors[int(c)] for c in labels])


def anchor_loss(features: np.ndarray, labels: np.ndarray, anchors: FeatureAnchorSet) -> float:
    """Mean over the batch of ||feature - anchor of its class||^2."""
    diff = features - _anchor_targets(labels, anchors)
    return float((diff * diff).sum(axis=1).mean())


def combined_loss(model: ClientModel, inputs, labels, anchors: FeatureAnchorSet | None, lam: float) -> float:
    features, logits, _ = forward(model, inputs)
    loss = supervised_loss(logits, labels)
    if anchors is not None and lam > 0:
        loss += lam * anchor_loss(features, labels, anchors)
    return loss


@dataclass
class Gradients:
    extractor: list[tuple[np.ndarray, np.ndarray]]
    head_w: np.ndarray
    head_b: np.ndarray
    anchors: dict[int, np.ndarray] = field(default_factory=dict)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in self.extractor:
            out += [w, b]
        return out + [self.head_w, self.head_b]

    def is_finite(self) -> bool:
        return all(np.isfinite(g).all() for g in self.parameters()) and all(
            np.isfinite(g).all() for g in self.anchors.values()
        )


def backward(
    model: ClientModel,
    cache: ForwardCache,
    labels: np.ndarray,
    anchors: FeatureAnchorSet | None,
    lam: float,
) -> Gradients:
    """Exact gradient of ``CE + lam * anchor_loss`` for the batch in ``cache``."""
    features = cache.features
    n = features.shape[0]
    logits = features @ model.head_w + model.head_b
    y = _check_labels(labels, n, model.n_classes)

    dlogits = np.exp(log_softmax(logits))
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    g_head_w = features.T @ dlogits
    g_head_b = dlogits.sum(axis=0)
    dfeat = dlogits @ model.head_w.T

    g_anchors: dict[int, np.ndarray] = {}
    if anchors is not None:
        g_anchors = {c: np.zeros_like(v) for c, v in anchors.anchors.items()}
        if lam > 0:
            resid = features - _anchor_targets(y, anchors)
            dfeat = dfeat + (2.0 * lam / n) * resid
            for c in np.unique(y):
                g_anchors[int(c)] = -(2.0 * lam / n) * resid[y == c].sum(axis=0)

    grads = []
    dz = dfeat
    for i in range(len(model.extractor) - 1, -1, -1):
        w, _ = model.extractor[i]
        grads.append((cache.layer_inputs[i].T @ dz, dz.sum(axis=0)))
        if i:
            da = dz @ w.T
            dz = da * (1.0 - np.tanh(cache.pre_activations[i - 1]) ** 2)
    grads.reverse()

    out = Gradients(grads, g_head_w, g_head_b, g_anchors)
    if not out.is_finite():
        raise NumericalError("non-finite gradient")
    return out


def class_mean_anchors(model: ClientModel, inputs, labels, previous: FeatureAnchorSet) -> FeatureAnchorSet:
    """Anchors recomputed as per-class feature means; classes without data keep their old anchor."""
    features, _, _ = forward(model, inputs)
    y = np.asarray(labels)
    out = previous.copy()
    for c in previous.classes:
        mask = y == c
        if mask.any():
            out.anchors[c] = features[mask].mean(axis=0)
    return out


def local_train(
    model: ClientModel,
    anchors: FeatureAnchorSet | None,
    inputs: np.ndarray,
    labels: np.ndarray,
    config: LocalTrainConfig,
    rng: np.random.Generator,
) -> tuple[ClientModel, FeatureAnchorSet | None, list[float]]:
    """R epochs of shuffled mini-batch gradient descent on CE + lam * anchor loss.

    Passing ``anchors=None`` trains on cross-entropy alone. Inputs are never
    modified; a fresh model and anchor set are returned.
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(labels)
    n = len(y)
    if n == 0:
        raise InputError("cannot train on an empty dataset")
    eta = config.learning_rate
    lam = config.lam if anchors is not None else 0.0
    params = [p.copy() for p in model.parameters()]
    current = model.with_parameters(params)
    anchors = anchors.copy() if anchors is not None else None
    trace = []

    for _ in range(config.local_rounds):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = x[idx], y[idx]
            features, logits, cache = forward(current, xb)
            loss = supervised_loss(logits, yb)
            if lam > 0:
                loss += lam * anchor_loss(features, yb, anchors)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite training loss {loss}")
            trace.append(loss)
            grads = backward(current, cache, yb, anchors, lam)
            params = [p - eta * g for p, g in zip(params, grads.parameters())]
            current = current.with_parameters(params)
            if anchors is not None and config.anchors_learnable and lam > 0:
                for c, g in grads.anchors.items():
                    anchors.anchors[c] = anchors.anchors[c] - eta * g

    if not current.is_finite():
        raise NumericalError("training produced non-finite parameters")
    if anchors is not None and not config.anchors_learnable:
        anchors = class_mean_anchors(current, x, y, anchors)
    return current, anchors, trace


def predict(model: ClientModel, inputs: np.ndarray) -> np.ndarray:
    _, logits, _ = forward(model, inputs)
    return logits.argmax(axis=1)
