"""Dense layers with hand-written backward passes, losses and Adam.

Everything works on float64 numpy arrays. A layer accepts either a single
vector of shape ``(in,)`` or a batch of shape ``(n, in)``; weights are stored
``(out, in)`` so a batch forward is ``x @ W.T + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

ACTIVATIONS = ("relu", "sigmoid", "softmax", "identity")

Params = dict[str, np.ndarray]


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weights rows {self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size


class DropoutPlan:
    """Inverted dropout: train-mode activations are scaled by 1/(1-rate)."""

    def __init__(self, rate: float = 0.0, mode: str = "eval", seed: int | None = 0):
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
        if mode not in ("train", "eval"):
            raise ContractError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
        self.rate = float(rate)
        self.mode = mode
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    @property
    def active(self) -> bool:
        return self.mode == "train" and self.rate > 0.0

    def mask(self, shape) -> np.ndarray | None:
        if not self.active:
            return None
        keep = self.rng.random(shape) >= self.rate
        return keep / (1.0 - self.rate)


EVAL = DropoutPlan(0.0, "eval")


@dataclass
class DenseCache:
    inputs: np.ndarray
    preact: np.ndarray
    output: np.ndarray
    mask: np.ndarray | None
    shape: tuple[int, int]


def sigmoid(x):
    # tanh form never overflows and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise ContractError("softmax of an empty vector")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return sigmoid(z)
    if activation == "softmax":
        return softmax(z)
    return z.copy()


def dense_forward(layer: DenseLayer, x, dropout: DropoutPlan | None = None):
    """Apply ``activation(W x + b)``; dropout (if any) masks the activated output.

    Returns ``(output, cache)``. Output has the same leading shape as ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(
            f"input has shape {x.shape}, layer weights have shape {layer.weights.shape}"
        )
    z = x @ layer.weights.T + layer.bias
    out = _activate(z, layer.activation)
    mask = dropout.mask(out.shape) if dropout is not None else None
    if mask is not None:
        out = out * mask
    return out, DenseCache(x, z, out, mask, layer.weights.shape)


def backward_from_preactivation(layer: DenseLayer, cache: DenseCache, grad_z):
    """Backprop a gradient given with respect to the pre-activation ``Wx + b``."""
    if cache.shape != layer.weights.shape:
        raise ContractError(
            f"cache was produced by a {cache.shape} layer, not {layer.weights.shape}"
        )
    grad_z = np.asarray(grad_z, dtype=np.float64)
    if grad_z.shape != cache.preact.shape:
        raise ShapeError(f"gradient shape {grad_z.shape} != output shape {cache.preact.shape}")
    x = cache.inputs
    if grad_z.ndim == 1:
        grad_w = np.outer(grad_z, x)
        grad_b = grad_z.copy()
    else:
        grad_w = grad_z.T @ x
        grad_b = grad_z.sum(axis=0)
    grad_x = grad_z @ layer.weights
    return grad_x, {"weight": grad_w, "bias": grad_b}


def dense_backward(layer: DenseLayer, cache: DenseCache, grad_output):
    """Exact chain-rule gradients of :func:`dense_forward` (dropout mask included)."""
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != cache.preact.shape:
        raise ShapeError(f"gradient shape {g.shape} != output shape {cache.preact.shape}")
    if cache.mask is not None:
        g = g * cache.mask
    act = layer.activation
    if act == "relu":
        g = g * (cache.preact > 0)
    elif act == "sigmoid":
        p = sigmoid(cache.preact)
        g = g * p * (1.0 - p)
    elif act == "softmax":
        p = softmax(cache.preact)
        g = p * (g - (g * p).sum(axis=-1, keepdims=True))
    return backward_from_preactivation(layer, cache, g)


def mlp_forward(layers: Sequence[DenseLayer], x, dropout: DropoutPlan | None = None):
    """Run a stack; dropout applies to every layer but the last."""
    caches = []
    h = x
    for i, layer in enumerate(layers):
        last = i == len(layers) - 1
        h, cache = dense_forward(layer, h, None if last else dropout)
        caches.append(cache)
    return h, caches


def mlp_backward(layers: Sequence[DenseLayer], caches, grad, *, from_preactivation=False):
    """Backward through a stack. Returns ``(grad_input, [layer grads...])``."""
    grads: list[dict] = [None] * len(layers)  # type: ignore[list-item]
    g = grad
    for i in range(len(layers) - 1, -1, -1):
        if i == len(layers) - 1 and from_preactivation:
            g, grads[i] = backward_from_preactivation(layers[i], caches[i], g)
        else:
            g, grads[i] = dense_backward(layers[i], caches[i], g)
    return g, grads


def glorot_layer(rng: np.random.Generator, fan_in: int, fan_out: int, activation: str) -> DenseLayer:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
    return DenseLayer(w, np.zeros(fan_out), activation)


# -- losses, all computed from logits -------------------------------------


def bce_with_logits(z, y):
    """Binary cross-entropy and its gradient w.r.t. the logit."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    loss = y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)
    return loss, sigmoid(z) - y


def softmax_cross_entropy(z, y):
    """Categorical cross-entropy for integer targets ``y`` (rows of ``z`` are logits)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    idx = np.asarray(y, dtype=np.int64).reshape(-1)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = lse - z[rows, idx]
    grad = softmax(z)
    grad[rows, idx] -= 1.0
    return loss, grad


def squared_error(pred, y):
    d = np.asarray(pred, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return d * d, 2.0 * d


# -- gradient utilities ----------------------------------------------------


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Params:
    if not max_norm > 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return {k: np.array(g, dtype=np.float64) for k, g in grads.items()}
    scale = max_norm / norm
    return {k: np.asarray(g, dtype=np.float64) * scale for k, g in grads.items()}


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError("Adam betas must lie in (0, 1)")
        if self.t < 0:
            raise ContractError("Adam step counter must be non-negative")


def adam_step(params: Params, grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Parameters without a gradient entry are left untouched (frozen).
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ContractError(
                f"gradient shape {np.shape(g)} != parameter shape {params[name].shape} for {name!r}"
            )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


def finite_diff_grad(f: Callable[[], float], params: Params, eps: float = 1e-5) -> Params:
    """Central differences of ``f()`` w.r.t. every entry of ``params``.

    ``f`` takes no arguments and must read the (mutated in place) parameter
    arrays; each entry is restored after probing.
    """
    if not eps > 0:
        raise ContractError("eps must be positive")
    out: Params = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f()
            flat[i] = orig - eps
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
        out[name] = g
    return out


def max_relative_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray]) -> float:
    """Largest per-tensor ``|a - n| / max(|a|, |n|)`` (L2 norms), tiny-norm safe."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(n))
        diff = np.linalg.norm(a - n)
        err = diff / denom if denom > 1e-8 else diff
        worst = max(worst, float(err))
    return worst


def task_loss(kind: str, z, y):
    """Per-row loss and gradient w.r.t. the prediction-layer pre-activation.

    ``z`` is ``(n, out)`` (or ``(out,)`` for one sample); ``y`` holds labels,
    class indices or real targets.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if kind == "binary":
        loss, g = bce_with_logits(z2[:, 0], y)
        g = g[:, None]
    elif kind == "multiclass":
        loss, g = softmax_cross_entropy(z2, y)
    elif kind == "regression":
        loss, g = squared_error(z2[:, 0], y)
        g = g[:, None]
    else:
        raise ContractError(f"unknown task kind {kind!r}")
    if single:
        return float(loss[0]), g[0]
    return loss, g
