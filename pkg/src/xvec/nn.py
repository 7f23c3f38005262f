"""Dense numeric primitives with exact forward and backward passes.

Everything operates on float64 matrices whose rows index time and whose
columns index features. Layers cache the activations they need for the
backward pass only when ``train=True``; inference-mode forwards are pure
and therefore safe to run concurrently on a shared model.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError, TrainingError

LEAKY_SLOPE = 0.01
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99
PROB_FLOOR = 1e-12


def as_matrix(x) -> np.ndarray:
    """Coerce to a 2-D float64 array, validating finiteness."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ConfigError(f"expected a T x d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DataError("matrix contains non-finite entries")
    return a


class Parameter:
    """A trainable array together with its accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.value.shape})"


def glorot_uniform(rng: np.random.Generator, dout: int, din: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (din + dout))
    return rng.uniform(-limit, limit, size=(dout, din))


class Affine:
    """y[t] = weight @ x[t] + bias, with weight of shape (dout, din)."""

    def __init__(self, weight: Parameter, bias: Parameter):
        if weight.value.ndim != 2 or bias.value.ndim != 1:
            raise ConfigError("affine expects a 2-D weight and 1-D bias")
        if weight.value.shape[0] != bias.value.shape[0]:
            raise ConfigError(
                f"affine weight rows {weight.value.shape[0]} != bias length {bias.value.shape[0]}"
            )
        self.weight = weight
        self.bias = bias
        self._x = None

    @classmethod
    def build(cls, rng: np.random.Generator, din: int, dout: int, name: str) -> "Affine":
        return cls(
            Parameter(f"{name}.weight", glorot_uniform(rng, dout, din)),
            Parameter(f"{name}.bias", np.zeros(dout)),
        )

    @property
    def din(self) -> int:
        return self.weight.value.shape[1]

    @property
    def dout(self) -> int:
        return self.weight.value.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[1] != self.din:
            raise ConfigError(
                f"affine {self.weight.name}: input has {x.shape[1]} columns, expected {self.din}"
            )
        if train:
            self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("affine backward called before a train-mode forward")
        x, self._x = self._x, None
        self.weight.grad += grad_out.T @ x
        self.bias.grad += grad_out.sum(axis=0)
        return grad_out @ self.weight.value


class LeakyReLU:
    def __init__(self, slope: float = LEAKY_SLOPE):
        if not 0.0 <= slope < 1.0:
            raise ConfigError(f"leaky ReLU slope must be in [0, 1), got {slope}")
        self.slope = slope
        self._keep = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        keep = x >= 0.0
        if train:
            self._keep = keep
        return np.where(keep, x, self.slope * x)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._keep is None:
            raise RuntimeError("leaky ReLU backward called before a train-mode forward")
        keep, self._keep = self._keep, None
        return np.where(keep, grad_out, self.slope * grad_out)


class BatchNorm:
    """Per-column batch normalization with learned scale and shift.

    Train mode normalizes with the biased variance of the current batch and
    blends the batch statistics into the running ones; inference mode applies
    the frozen running statistics, which makes it a per-column affine map.
    """

    def __init__(
        self,
        gamma: Parameter,
        beta: Parameter,
        momentum: float = BN_MOMENTUM,
        epsilon: float = BN_EPSILON,
    ):
        if not 0.0 < momentum < 1.0:
            raise ConfigError(f"batch norm momentum must be in (0, 1), got {momentum}")
        if epsilon <= 0.0:
            raise ConfigError(f"batch norm epsilon must be positive, got {epsilon}")
        self.gamma = gamma
        self.beta = beta
        self.momentum = momentum
        self.epsilon = epsilon
        dim = gamma.value.shape[0]
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self._cache = None

    @classmethod
    def build(cls, dim: int, name: str) -> "BatchNorm":
        return cls(Parameter(f"{name}.gamma", np.ones(dim)), Parameter(f"{name}.beta", np.zeros(dim)))

    @property
    def dim(self) -> int:
        return self.gamma.value.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[1] != self.dim:
            raise ConfigError(
                f"batch norm {self.gamma.name}: input has {x.shape[1]} columns, expected {self.dim}"
            )
        if train:
            if x.shape[0] < 2:
                raise TrainingError(
                    f"batch norm {self.gamma.name} needs at least 2 rows in train mode, got {x.shape[0]}"
                )
            mean = x.mean(axis=0)
            var = x.var(axis=0)  # biased
            inv_std = 1.0 / np.sqrt(var + self.epsilon)
            x_hat = (x - mean) * inv_std
            self.running_mean = self.momentum * self.running_mean + (1.0 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1.0 - self.momentum) * var
            self._cache = (x_hat, inv_std)
            return self.gamma.value * x_hat + self.beta.value
        inv_std = 1.0 / np.sqrt(self.running_var + self.epsilon)
        return self.gamma.value * (x - self.running_mean) * inv_std + self.beta.value

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("batch norm backward called before a train-mode forward")
        (x_hat, inv_std), self._cache = self._cache, None
        n = grad_out.shape[0]
        self.gamma.grad += (grad_out * x_hat).sum(axis=0)
        self.beta.grad += grad_out.sum(axis=0)
        g = grad_out * self.gamma.value
        return (inv_std / n) * (n * g - g.sum(axis=0) - x_hat * (g * x_hat).sum(axis=0))


class Splice:
    """Temporal splicing: each output row concatenates the input rows at the
    configured offsets, with out-of-range indices clamped to the edges."""

    def __init__(self, offsets):
        offsets = tuple(int(o) for o in offsets)
        if len(offsets) == 0:
            raise ConfigError("splice offsets must be non-empty")
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise ConfigError(f"splice offsets must be strictly increasing, got {offsets}")
        if 0 not in offsets:
            raise ConfigError(f"splice offsets must contain 0, got {offsets}")
        self.offsets = offsets
        self._cache = None
        self._batch_cache = None

    @property
    def width_multiplier(self) -> int:
        return len(self.offsets)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        t, d = x.shape
        idx = np.clip(np.arange(t)[:, None] + np.asarray(self.offsets), 0, t - 1)
        if train:
            self._cache = (idx, t, d)
        return x[idx].reshape(t, len(self.offsets) * d)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("splice backward called before a train-mode forward")
        (idx, t, d), self._cache = self._cache, None
        dx = np.zeros((t, d))
        np.add.at(dx, idx.ravel(), grad_out.reshape(t * len(self.offsets), d))
        return dx

    def forward_batch(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Splice a (B, T, d) stack of equal-length chunks, each clamped at
        its own edges so no frame leaks across chunk boundaries."""
        b, t, d = x.shape
        idx = np.clip(np.arange(t)[:, None] + np.asarray(self.offsets), 0, t - 1)
        if train:
            self._batch_cache = (idx, b, t, d)
        return x[:, idx, :].reshape(b, t, len(self.offsets) * d)

    def backward_batch(self, grad_out: np.ndarray) -> np.ndarray:
        if self._batch_cache is None:
            raise RuntimeError("splice backward called before a train-mode forward")
        (idx, b, t, d), self._batch_cache = self._batch_cache, None
        dx = np.zeros((b, t, d))
        np.add.at(dx, (slice(None), idx.ravel()), grad_out.reshape(b, t * len(self.offsets), d))
        return dx


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class Softmax:
    """Row-wise softmax layer with cached output for the backward pass."""

    def __init__(self):
        self._p = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        p = softmax_rows(x)
        if train:
            self._p = p
        return p

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._p is None:
            raise RuntimeError("softmax backward called before a train-mode forward")
        p, self._p = self._p, None
        return p * (grad_out - (grad_out * p).sum(axis=-1, keepdims=True))


def cross_entropy(posteriors: np.ndarray, labels) -> float:
    """Mean negative log posterior of the true class.

    Rows must already be normalized distributions; probabilities below
    ``PROB_FLOOR`` are clamped before the log.
    """
    p = np.asarray(posteriors, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or labels.shape != (p.shape[0],):
        raise DataError(f"posteriors {p.shape} do not match {labels.shape[0] if labels.ndim else 0} labels")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise DataError("posterior rows must sum to 1 within 1e-6")
    if np.any(labels < 0) or np.any(labels >= p.shape[1]):
        raise DataError(f"label out of range [0, {p.shape[1]})")
    picked = p[np.arange(p.shape[0]), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def cross_entropy_backward(posteriors: np.ndarray, labels) -> np.ndarray:
    """Gradient of cross_entropy w.r.t. the posteriors (zero inside the clamp)."""
    p = np.asarray(posteriors, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    grad = np.zeros_like(p)
    rows = np.arange(p.shape[0])
    picked = p[rows, labels]
    live = picked >= PROB_FLOOR
    grad[rows[live], labels[live]] = -1.0 / (p.shape[0] * picked[live])
    return grad
