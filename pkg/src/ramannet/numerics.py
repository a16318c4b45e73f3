"""Dense-network numerical core with hand-written backward passes.

Layers are plain dataclasses holding numpy arrays; forward/backward are free
functions so the model can wire them explicitly.  Every array is expected in
a single floating dtype (float32 for training, float64 for gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LabelError, ShapeError

TRAIN = "train"
INFER = "infer"
_MODES = (TRAIN, INFER)


def _check_mode(mode):
    if mode not in _MODES:
        raise ConfigError(f"mode must be one of {_MODES}, got {mode!r}")


# ----------------------------------------------------------------------------
# dense


@dataclass
class DenseLayer:
    weights: np.ndarray  # [in_dim, out_dim]
    bias: np.ndarray  # [out_dim]

    def __post_init__(self):
        if self.weights.ndim != 2 or min(self.weights.shape) < 1:
            raise ShapeError(f"weights must be a non-empty matrix, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match out_dim {self.weights.shape[1]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def glorot(cls, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        """Uniform Glorot init, zero bias."""
        if in_dim < 1 or out_dim < 1:
            raise ShapeError(f"in_dim and out_dim must be >= 1, got {in_dim}, {out_dim}")
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-limit, limit, size=(in_dim, out_dim)).astype(dtype)
        return cls(w, np.zeros(out_dim, dtype=dtype))


def dense_forward(layer: DenseLayer, batch: np.ndarray) -> np.ndarray:
    if batch.ndim != 2 or batch.shape[1] != layer.in_dim:
        raise ShapeError(
            f"dense input: expected [B x {layer.in_dim}], got {list(batch.shape)}"
        )
    return batch @ layer.weights + layer.bias


def dense_backward(layer: DenseLayer, batch: np.ndarray, upstream: np.ndarray):
    """Return ``(grad_weights, grad_bias, grad_input)``."""
    if batch.ndim != 2 or batch.shape[1] != layer.in_dim:
        raise ShapeError(
            f"dense input: expected [B x {layer.in_dim}], got {list(batch.shape)}"
        )
    if upstream.shape != (batch.shape[0], layer.out_dim):
        raise ShapeError(
            f"dense upstream: expected {[batch.shape[0], layer.out_dim]}, got {list(upstream.shape)}"
        )
    return batch.T @ upstream, upstream.sum(axis=0), upstream @ layer.weights.T


# ----------------------------------------------------------------------------
# activation


def leaky_relu(x: np.ndarray, slope: float = 0.3) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, upstream: np.ndarray, slope: float = 0.3) -> np.ndarray:
    # derivative at exactly 0 taken from the positive branch
    return np.where(x >= 0, upstream, slope * upstream)


# ----------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-3

    def __post_init__(self):
        dim = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != dim:
                raise ShapeError(f"batchnorm {name} shape {getattr(self, name).shape} != {dim}")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"batchnorm momentum must lie in (0, 1), got {self.momentum}")
        if self.epsilon <= 0:
            raise ConfigError(f"batchnorm epsilon must be > 0, got {self.epsilon}")

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def create(cls, dim: int, dtype=np.float32, momentum: float = 0.99, epsilon: float = 1e-3):
        return cls(
            gamma=np.ones(dim, dtype=dtype),
            beta=np.zeros(dim, dtype=dtype),
            running_mean=np.zeros(dim, dtype=dtype),
            running_var=np.ones(dim, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )


def batchnorm_forward(layer: BatchNormLayer, batch: np.ndarray, mode: str, update_stats: bool = True):
    """Normalize ``batch`` column-wise.

    In ``train`` mode the batch statistics are used and, unless
    ``update_stats`` is False, folded into the running averages.  In ``infer``
    mode only the running statistics are read.

    Returns ``(out, cache)``; the cache feeds :func:`batchnorm_backward`.
    """
    _check_mode(mode)
    if batch.ndim != 2 or batch.shape[1] != layer.dim:
        raise ShapeError(f"batchnorm input: expected [B x {layer.dim}], got {list(batch.shape)}")
    if mode == TRAIN:
        if batch.shape[0] < 2:
            raise ShapeError("batchnorm in train mode needs a batch of at least 2 rows")
        mean = batch.mean(axis=0)
        var = batch.var(axis=0)
        if update_stats:
            m = layer.momentum
            layer.running_mean[...] = m * layer.running_mean + (1 - m) * mean
            layer.running_var[...] = m * layer.running_var + (1 - m) * var
    else:
        mean = layer.running_mean
        var = layer.running_var
    inv_std = 1.0 / np.sqrt(var + layer.epsilon)
    xhat = (batch - mean) * inv_std
    out = layer.gamma * xhat + layer.beta
    return out, (mode, xhat, inv_std)


def batchnorm_backward(layer: BatchNormLayer, cache, upstream: np.ndarray):
    """Return ``(grad_gamma, grad_beta, grad_input)``."""
    mode, xhat, inv_std = cache
    if upstream.shape != xhat.shape:
        raise ShapeError(f"batchnorm upstream: expected {list(xhat.shape)}, got {list(upstream.shape)}")
    grad_gamma = (upstream * xhat).sum(axis=0)
    grad_beta = upstream.sum(axis=0)
    dxhat = upstream * layer.gamma
    if mode == TRAIN:
        n = upstream.shape[0]
        grad_input = (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )
    else:
        grad_input = dxhat * inv_std
    return grad_gamma, grad_beta, grad_input


# ----------------------------------------------------------------------------
# dropout


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.rate}")


def dropout_apply(spec: DropoutSpec, batch: np.ndarray, mode: str, rng: np.random.Generator | None = None):
    """Inverted dropout.  Returns ``(out, mask)``; ``mask`` is None when the op is the identity."""
    _check_mode(mode)
    if mode == INFER or spec.rate == 0.0:
        return batch, None
    if rng is None:
        raise ConfigError("train-mode dropout needs a random generator")
    keep = 1.0 - spec.rate
    mask = (rng.random(batch.shape) >= spec.rate).astype(batch.dtype) / batch.dtype.type(keep)
    return batch * mask, mask


def dropout_backward(mask: np.ndarray | None, upstream: np.ndarray) -> np.ndarray:
    return upstream if mask is None else upstream * mask


# ----------------------------------------------------------------------------
# losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of ``softmax(logits)`` against integer labels.

    Returns ``(loss, grad_logits)``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B x C], got {list(logits.shape)}")
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels: expected length {b}, got shape {labels.shape}")
    if b and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    rows = np.arange(b)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    grad /= b
    return float(loss), grad


def triplet_loss(anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray, margin: float):
    """Hinge on squared Euclidean distances, mean over triplets.

    ``max(|a-p|^2 - |a-n|^2 + margin, 0)``; the subgradient at the hinge is 0.
    Returns ``(loss, (grad_anchor, grad_positive, grad_negative))``.
    """
    if not anchor.shape == positive.shape == negative.shape or anchor.ndim != 2:
        raise ShapeError(
            f"triplet inputs must share a 2-D shape, got {anchor.shape}, {positive.shape}, {negative.shape}"
        )
    if margin < 0:
        raise ConfigError(f"margin must be >= 0, got {margin}")
    t = anchor.shape[0]
    if t == 0:
        zero = np.zeros_like(anchor)
        return 0.0, (zero, zero.copy(), zero.copy())
    d_ap = anchor - positive
    d_an = anchor - negative
    hinge = (d_ap**2).sum(axis=1) - (d_an**2).sum(axis=1) + margin
    active = (hinge > 0).astype(anchor.dtype)[:, None]
    loss = np.maximum(hinge, 0.0).mean()
    scale = active * (2.0 / t)
    grad_p = -scale * d_ap
    grad_n = scale * d_an
    grad_a = -(grad_p + grad_n)
    return float(loss), (grad_a, grad_p, grad_n)


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        m = state.first_moment.get(name)
        if m is not None and m.shape != g.shape:
            raise ShapeError(f"{name}: moment shape {m.shape} != gradient shape {g.shape}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step_size = state.learning_rate * np.sqrt(1 - b2**t) / (1 - b1**t)
    eps_hat = state.epsilon * np.sqrt(1 - b2**t)
    for name, g in grads.items():
        p = params[name]
        if name not in state.first_moment:
            state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (step_size * m / (np.sqrt(v) + eps_hat)).astype(p.dtype, copy=False)
    return params
