"""Two-layer ReLU feature extractor with a linear classifier head, and its
hand-written backward pass."""

from dataclasses import dataclass, fields

import numpy as np

from ..errors import ConsistencyError

PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wc", "bc")


@dataclass
class ToyModel:
    W1: np.ndarray  # (hidden, input_dim)
    b1: np.ndarray
    W2: np.ndarray  # (feature_dim, hidden)
    b2: np.ndarray
    Wc: np.ndarray  # (n_classes, feature_dim)
    bc: np.ndarray

    @classmethod
    def init(cls, input_dim, hidden_dim, feature_dim, n_classes, seed=0):
        """He-normal weights, zero biases except a small positive feature bias
        so no feature unit starts out dead."""
        rng = np.random.default_rng(seed)
        return cls(
            W1=rng.standard_normal((hidden_dim, input_dim)) * np.sqrt(2.0 / input_dim),
            b1=np.zeros(hidden_dim),
            W2=rng.standard_normal((feature_dim, hidden_dim)) * np.sqrt(2.0 / hidden_dim),
            b2=np.full(feature_dim, 0.01),
            Wc=rng.standard_normal((n_classes, feature_dim)) * np.sqrt(1.0 / feature_dim),
            bc=np.zeros(n_classes),
        )

    @property
    def input_dim(self):
        return self.W1.shape[1]

    @property
    def feature_dim(self):
        return self.W2.shape[0]

    @property
    def n_classes(self):
        return self.Wc.shape[0]

    def params(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self):
        return ToyModel(**{k: v.copy() for k, v in self.params().items()})

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.params().values())

    def save(self, path):
        np.savez(path, **self.params())

    @classmethod
    def load(cls, path):
        with np.load(path) as f:
            return cls(**{k: f[k] for k in PARAM_NAMES})


@dataclass
class ForwardCache:
    x: np.ndarray
    h_pre: np.ndarray
    h: np.ndarray
    z_pre: np.ndarray
    z: np.ndarray
    logits: np.ndarray


def forward(model, x):
    """Features ``z = relu(W2 relu(W1 x + b1) + b2)`` and logits ``Wc z + bc``.

    ``x`` is ``(B, input_dim)``. Returns ``(z, logits, cache)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.input_dim:
        raise ConsistencyError(f"input has {x.shape[1]} dims, model expects {model.input_dim}")
    h_pre = x @ model.W1.T + model.b1
    h = np.maximum(h_pre, 0.0)
    z_pre = h @ model.W2.T + model.b2
    z = np.maximum(z_pre, 0.0)
    logits = z @ model.Wc.T + model.bc
    return z, logits, ForwardCache(x, h_pre, h, z_pre, z, logits)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    B = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(B), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    return float(loss), grad / B


def backward(model, cache, grad_z=None, grad_logits=None):
    """Parameter gradients given upstream gradients on features and/or logits."""
    B = cache.x.shape[0]
    if grad_logits is None:
        grad_logits = np.zeros((B, model.n_classes))
    if grad_z is None:
        grad_z = np.zeros((B, model.feature_dim))
    if grad_logits.shape != cache.logits.shape or grad_z.shape != cache.z.shape:
        raise ConsistencyError("upstream gradient shapes do not match the forward pass")
    g = {
        "Wc": grad_logits.T @ cache.z,
        "bc": grad_logits.sum(axis=0),
    }
    dz = grad_z + grad_logits @ model.Wc
    dz_pre = dz * (cache.z_pre > 0)
    g["W2"] = dz_pre.T @ cache.h
    g["b2"] = dz_pre.sum(axis=0)
    dh_pre = (dz_pre @ model.W2) * (cache.h_pre > 0)
    g["W1"] = dh_pre.T @ cache.x
    g["b1"] = dh_pre.sum(axis=0)
    return {k: g[k] for k in PARAM_NAMES}


def predict(model, x):
    _, logits, _ = forward(model, x)
    return np.argmax(logits, axis=1)
