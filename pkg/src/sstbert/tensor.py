"""Numeric core: parameters, neural primitives with hand-written gradients, and ADAM.

Arrays are plain numpy ``ndarray`` objects (C-contiguous, row-major). Every
primitive comes as a ``*_forward`` returning ``(output, cache)`` and a matching
``*_backward`` that consumes the cache. All reductions go through numpy with a
fixed axis order so repeated runs are bit-identical.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

IGNORE_INDEX = -100


class ShapeError(ValueError):
    pass


class InvalidValueError(ValueError):
    pass


@contextmanager
def numeric_guard(where: str):
    """Re-raise non-finite value errors as ``FloatingPointError`` naming ``where``."""
    try:
        yield
    except InvalidValueError as e:
        raise FloatingPointError(f"{e} at {where}") from None


class Parameter:
    """A trainable array plus its gradient buffer.

    Shared weights are expressed by referencing the same ``Parameter`` object
    from several places; gradients then accumulate into one buffer.
    """

    __slots__ = ("name", "data", "grad", "requires_grad")

    def __init__(self, name: str, data: np.ndarray, requires_grad: bool = True):
        self.name = name
        self.data = np.ascontiguousarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {self.data.shape} for {self.name}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


# ---------------------------------------------------------------------------
# softmax / losses


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v)
    if v.size == 0:
        raise ShapeError("softmax of an empty array")
    if not np.all(np.isfinite(v)):
        raise InvalidValueError("softmax input contains non-finite values")
    return _softmax(v, axis)


def _softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    # tolerates -inf entries (attention masking) as long as each row has a finite value
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = v - np.max(v, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def cross_entropy(logits: np.ndarray, labels, ignore_index: int = IGNORE_INDEX):
    """Mean cross-entropy and its gradient with respect to ``logits``.

    ``logits`` is either a vector of C scores with an integer ``labels``, or an
    (N, C) matrix with N labels. Rows labelled ``ignore_index`` contribute
    neither loss nor gradient. Returns ``(loss, dlogits)``.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z.ndim != 2 or y.shape[0] != z.shape[0]:
        raise ShapeError(f"logits {logits.shape} incompatible with labels {y.shape}")
    c = z.shape[1]
    keep = y != ignore_index
    if np.any((y[keep] < 0) | (y[keep] >= c)):
        raise IndexError(f"label out of range for {c} classes")
    if not np.all(np.isfinite(z)):
        raise InvalidValueError("cross_entropy logits contain non-finite values")
    n = int(keep.sum())
    grad = np.zeros_like(z)
    if n == 0:
        loss = 0.0
    else:
        rows = np.nonzero(keep)[0]
        logp = log_softmax(z[rows])
        loss = float(-np.sum(logp[np.arange(n), y[rows]]) / n)
        g = np.exp(logp)
        g[np.arange(n), y[rows]] -= 1.0
        grad[rows] = g / n
    return loss, (grad[0] if single else grad)


def kl_divergence(target_logits: np.ndarray, logits: np.ndarray, temperature: float = 1.0):
    """Mean over rows of KL(softmax(target/T) || softmax(logits/T)).

    Returns ``(kl, dlogits)``; the gradient is for ``logits`` only.
    """
    t = float(temperature)
    p = _softmax(target_logits / t)
    logp = log_softmax(target_logits / t)
    logq = log_softmax(logits / t)
    n = logits.shape[0] if logits.ndim == 2 else 1
    kl = float(np.sum(p * (logp - logq)) / n)
    grad = (np.exp(logq) - p) / (t * n)
    return kl, grad


# ---------------------------------------------------------------------------
# linear / matmul


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are not conformable")
    return a @ b


def matmul_backward(dy: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of ``a @ b`` for 2-D ``b`` and any leading batch dims on ``a``."""
    da = dy @ b.T
    a2 = a.reshape(-1, a.shape[-1])
    db = a2.T @ dy.reshape(-1, dy.shape[-1])
    return da, db


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None):
    y = matmul(x, w)
    if b is not None:
        y = y + b
    return y, x


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray, has_bias: bool = True):
    dx, dw = matmul_backward(dy, x, w)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0) if has_bias else None
    return dx, dw, db


# ---------------------------------------------------------------------------
# layer norm


def layer_norm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-12):
    if x.shape[-1] != gain.shape[0]:
        raise ShapeError(f"layer_norm width {x.shape[-1]} != gain {gain.shape[0]}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv, gain = cache
    width = xhat.shape[-1]
    dgain = (dy * xhat).reshape(-1, width).sum(axis=0)
    dbias = dy.reshape(-1, width).sum(axis=0)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


# ---------------------------------------------------------------------------
# activations

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_forward(x: np.ndarray):
    """GELU, tanh approximation."""
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy: np.ndarray, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x > 0


def relu_backward(dy: np.ndarray, cache):
    return dy * cache


ACTIVATIONS = {
    "gelu": (gelu_forward, gelu_backward),
    "relu": (relu_forward, relu_backward),
}


# ---------------------------------------------------------------------------
# dropout / embeddings


def dropout_forward(x: np.ndarray, p: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None when inactive."""
    if not 0.0 <= p < 1.0:
        raise InvalidValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * mask, mask


def dropout_backward(dy: np.ndarray, mask):
    return dy if mask is None else dy * mask


def embedding_lookup(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {table.shape[0]})")
    return table[ids]


def embedding_backward(dy: np.ndarray, ids: np.ndarray, num_rows: int) -> np.ndarray:
    dtable = np.zeros((num_rows, dy.shape[-1]), dtype=dy.dtype)
    np.add.at(dtable, np.asarray(ids).reshape(-1), dy.reshape(-1, dy.shape[-1]))
    return dtable


# ---------------------------------------------------------------------------
# ADAM


@dataclass
class AdamState:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise InvalidValueError("ADAM betas must lie in (0, 1)")
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise InvalidValueError("learning rate and epsilon must be positive")


def adam_step(params: list, grads: list, state: AdamState, learning_rate: float | None = None):
    """One bias-corrected ADAM update, applied in place.

    ``params`` and ``grads`` are parallel lists of arrays. Moments are created
    lazily (zeros) on the first call. ``learning_rate`` overrides the state's
    rate for this step only (used by schedules). Optional decoupled weight
    decay is off by default.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if state.t == 0 and not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match the parameter list")
    lr = state.learning_rate if learning_rate is None else learning_rate
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"param {p.shape} / grad {g.shape} / moment {m.shape} mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if state.weight_decay:
            update = update + lr * state.weight_decay * p
        p -= update.astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking


def numerical_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place then restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor). The floor keeps near-zero entries from dominating."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
