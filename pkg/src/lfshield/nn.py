"""One-hidden-layer ReLU/softmax classifier with analytic backprop and momentum SGD.

Everything is float64. Parameters are plain value objects; nothing here keeps
state between calls, so distinct copies can be trained from different threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lfshield.errors import ContractError, ShapeError

LOG_CLAMP = 1e-12


@dataclass
class ModelParams:
    w1: np.ndarray  # (hidden, input)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (classes, hidden)
    b2: np.ndarray  # (classes,)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def classes(self) -> int:
        return self.w2.shape[0]

    @property
    def size(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.w1, self.b1, self.w2, self.b2

    def copy(self) -> ModelParams:
        return ModelParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> ModelParams:
        return ModelParams(*(np.zeros_like(a) for a in self.arrays()))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def like_vector(self, vec: np.ndarray) -> ModelParams:
        """Rebuild parameters with this object's shapes from a flat vector."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeError(f"expected flat vector of length {self.size}, got {vec.shape}")
        out, start = [], 0
        for a in self.arrays():
            out.append(vec[start:start + a.size].reshape(a.shape).copy())
            start += a.size
        return ModelParams(*out)

    def output_layer(self) -> np.ndarray:
        """Per output neuron: its incoming weights followed by its bias, shape (classes, hidden+1)."""
        return np.hstack([self.w2, self.b2[:, None]])

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def check_same_shape(self, other: ModelParams) -> None:
        for a, b in zip(self.arrays(), other.arrays()):
            if a.shape != b.shape:
                raise ShapeError(f"parameter shape mismatch: {a.shape} vs {b.shape}")


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    hidden_pre: np.ndarray
    hidden_act: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


@dataclass(frozen=True)
class Hyperparams:
    lr: float = 0.01
    momentum: float = 0.9
    local_epochs: int = 1
    batch_size: int = 32

    def __post_init__(self):
        # lr = 0 is allowed (a frozen model); experiments still need lr > 0
        if not self.lr >= 0:
            raise ContractError(f"lr must be non-negative, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.local_epochs < 0:
            raise ContractError(f"local_epochs must be non-negative, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")


def init_params(input_dim: int, hidden: int, classes: int, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    def glorot(fan_out, fan_in):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_out, fan_in))

    return ModelParams(
        w1=glorot(hidden, input_dim),
        b1=np.zeros(hidden),
        w2=glorot(classes, hidden),
        b2=np.zeros(classes),
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: ModelParams, x: np.ndarray) -> ForwardTrace:
    """Run one example (1-D ``x``) or a batch (2-D, one row per example)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != params.input_dim:
        raise ShapeError(f"input of shape {x.shape} does not match input dim {params.input_dim}")
    hidden_pre = x @ params.w1.T + params.b1
    hidden_act = np.maximum(hidden_pre, 0.0)
    logits = hidden_act @ params.w2.T + params.b2
    return ForwardTrace(x, hidden_pre, hidden_act, logits, softmax(logits))


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def _check_one_hot(y: np.ndarray) -> None:
    if not (np.isin(y, (0.0, 1.0)).all() and (y.sum(axis=-1) == 1).all()):
        raise ContractError("targets must be one-hot")


def cross_entropy(probs: np.ndarray, y: np.ndarray) -> float:
    """Negative log-probability of the true class; batches are averaged."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if probs.shape != y.shape:
        raise ShapeError(f"probs {probs.shape} and targets {y.shape} differ in shape")
    _check_one_hot(y)
    true_p = (probs * y).sum(axis=-1)
    return float(np.mean(-np.log(np.maximum(true_p, LOG_CLAMP))))


def output_delta(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Loss gradient at the output pre-activations: p - y."""
    return probs - y


def backward(params: ModelParams, trace: ForwardTrace, y: np.ndarray) -> ModelParams:
    """Gradient of the (batch-mean) cross-entropy with respect to every parameter."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != trace.probs.shape:
        raise ShapeError(f"targets {y.shape} do not match probs {trace.probs.shape}")
    batched = y.ndim == 2
    delta = output_delta(trace.probs, y)
    x, h_pre, h_act = trace.inputs, trace.hidden_pre, trace.hidden_act
    if not batched:
        delta, x, h_pre, h_act = delta[None], x[None], h_pre[None], h_act[None]
    n = delta.shape[0]

    g_w2 = delta.T @ h_act / n
    g_b2 = delta.mean(axis=0)
    # ReLU gate: only units with positive pre-activation pass error back
    hidden_delta = (delta @ params.w2) * (h_pre > 0)
    g_w1 = hidden_delta.T @ x / n
    g_b1 = hidden_delta.mean(axis=0)
    return ModelParams(g_w1, g_b1, g_w2, g_b2)


def sgd_step(
    params: ModelParams, velocity: ModelParams, grad: ModelParams, hp: Hyperparams
) -> tuple[ModelParams, ModelParams]:
    """Heavy-ball momentum: v <- mu*v + g, then theta <- theta - lr*v."""
    params.check_same_shape(grad)
    params.check_same_shape(velocity)
    new_v = [hp.momentum * v + g for v, g in zip(velocity.arrays(), grad.arrays())]
    new_p = [p - hp.lr * v for p, v in zip(params.arrays(), new_v)]
    return ModelParams(*new_p), ModelParams(*new_v)


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return forward(params, x).logits.argmax(axis=-1)
