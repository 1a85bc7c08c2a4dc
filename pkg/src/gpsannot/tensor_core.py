"""Minimal differentiable compute core for the refinement and ranking models.

Sequences are float64 arrays shaped (N, C) — N time steps, C channels — with
an optional leading batch axis (B, N, C).  Backprop is explicit: every op has
a matching `*_backward` function, and models wire the chain rule by hand.  No
tape; the model graphs here are small and static, and repeated (weight-shared)
applications just call the same backward with their own cached inputs.
"""

from __future__ import annotations

import json

import numpy as np

_DEBUG_FINITE = False


class ShapeMismatch(Exception):
    """Operand shapes are incompatible."""


class Diverged(Exception):
    """Training produced a non-finite loss."""


def set_debug(flag: bool):
    """Enable NaN/Inf checks after every op (slow; tests only)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(flag)


def _check(x):
    if _DEBUG_FINITE and not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite tensor values")
    return x


def _as_batched(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeMismatch("expected (N, C) or (B, N, C), got shape %s" % (x.shape,))


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def conv1d(x, kernel, bias):
    """Same-padded 1-D cross-correlation along the time axis.

    Args:
        x: (N, Cin) or (B, N, Cin).
        kernel: (k, Cin, Cout), k odd.
        bias: (Cout,).

    Returns:
        (N, Cout) or (B, N, Cout); output length equals input length.
    """
    kernel = np.asarray(kernel, dtype=float)
    bias = np.asarray(bias, dtype=float)
    k, cin, cout = kernel.shape
    if k % 2 != 1:
        raise ShapeMismatch("kernel size must be odd, got %d" % k)
    xb, squeeze = _as_batched(x)
    if xb.shape[-1] != cin:
        raise ShapeMismatch("conv1d expects %d channels, got %d" % (cin, xb.shape[-1]))
    b, n, _ = xb.shape
    pad = k // 2
    xp = np.zeros((b, n + 2 * pad, cin))
    xp[:, pad:pad + n] = xb
    y = np.broadcast_to(bias, (b, n, cout)).copy()
    for dk in range(k):
        y += xp[:, dk:dk + n] @ kernel[dk]
    return _check(y[0] if squeeze else y)


def conv1d_backward(x, kernel, dy):
    """Gradients of conv1d w.r.t. input, kernel and bias."""
    kernel = np.asarray(kernel, dtype=float)
    k, cin, cout = kernel.shape
    xb, squeeze = _as_batched(x)
    dyb, _ = _as_batched(dy)
    b, n, _ = xb.shape
    pad = k // 2
    xp = np.zeros((b, n + 2 * pad, cin))
    xp[:, pad:pad + n] = xb
    dxp = np.zeros_like(xp)
    dkernel = np.zeros_like(kernel)
    dyf = dyb.reshape(-1, cout)
    for dk in range(k):
        dxp[:, dk:dk + n] += dyb @ kernel[dk].T
        dkernel[dk] = xp[:, dk:dk + n].reshape(-1, cin).T @ dyf
    dbias = dyb.sum(axis=(0, 1))
    dx = dxp[:, pad:pad + n]
    return (dx[0] if squeeze else dx), dkernel, dbias


def dense(x, w, b):
    """Affine map over the channel (last) axis: y = x @ w + b."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch("dense expects %d channels, got %d" % (w.shape[0], x.shape[-1]))
    return _check(x @ w + b)


def dense_backward(x, w, dy):
    x = np.asarray(x, dtype=float)
    dy = np.asarray(dy, dtype=float)
    axes = tuple(range(x.ndim - 1))
    dw = np.tensordot(x, dy, axes=(axes, axes))
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dx = dy @ np.asarray(w, dtype=float).T
    return dx, dw, db


def relu(x):
    return np.maximum(np.asarray(x, dtype=float), 0.0)


def relu_backward(x, dy):
    return dy * (np.asarray(x) > 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _check(y)


def sigmoid_backward(y, dy):
    # y is the forward output
    return dy * y * (1.0 - y)


def _pair_check(pred, target):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeMismatch("loss operands differ: %s vs %s" % (pred.shape, target.shape))
    return pred, target


def loss_l1(pred, target) -> float:
    """Mean absolute error."""
    pred, target = _pair_check(pred, target)
    return float(np.mean(np.abs(pred - target)))


def loss_l1_grad(pred, target) -> np.ndarray:
    # subgradient at 0 taken as 0 (np.sign(0) == 0)
    pred, target = _pair_check(pred, target)
    return np.sign(pred - target) / pred.size


def loss_l2(pred, target) -> float:
    """Mean squared error."""
    pred, target = _pair_check(pred, target)
    return float(np.mean((pred - target) ** 2))


def loss_l2_grad(pred, target) -> np.ndarray:
    pred, target = _pair_check(pred, target)
    return 2.0 * (pred - target) / pred.size


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

def glorot_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParamStore:
    """Named parameter tensors with matching gradient tensors and Adam state."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.step = 0
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}

    def add(self, name: str, shape, fan_in: int, fan_out: int, zero: bool = False) -> np.ndarray:
        if name in self.params:
            raise ValueError("duplicate parameter %r" % name)
        p = np.zeros(shape) if zero else glorot_init(self.rng, shape, fan_in, fan_out)
        self.params[name] = p
        self.grads[name] = np.zeros_like(p)
        self._adam_m[name] = np.zeros_like(p)
        self._adam_v[name] = np.zeros_like(p)
        return p

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, name: str, grad):
        self.grads[name] += grad

    def to_blob(self) -> dict:
        return {
            "seed": self.seed,
            "step": self.step,
            "params": {
                name: {"shape": list(p.shape), "data": p.ravel().tolist()}
                for name, p in sorted(self.params.items())
            },
        }

    @staticmethod
    def from_blob(blob: dict) -> "ParamStore":
        store = ParamStore(blob["seed"])
        store.step = int(blob["step"])
        for name, rec in blob["params"].items():
            p = np.array(rec["data"], dtype=float).reshape(rec["shape"])
            store.params[name] = p
            store.grads[name] = np.zeros_like(p)
            store._adam_m[name] = np.zeros_like(p)
            store._adam_v[name] = np.zeros_like(p)
        return store

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_blob(), f, sort_keys=True)

    @staticmethod
    def load(path) -> "ParamStore":
        with open(path) as f:
            return ParamStore.from_blob(json.load(f))


def optimizer_step(store: ParamStore, lr: float, schedule=None) -> ParamStore:
    """One Adam update (beta1=0.9, beta2=0.999, eps=1e-8) over all parameters.

    `schedule`, if given, maps the 1-based step count to a learning-rate
    multiplier.
    """
    b1, b2, eps = 0.9, 0.999, 1e-8
    store.step += 1
    t = store.step
    if schedule is not None:
        lr = lr * schedule(t)
    for name in sorted(store.params):
        p = store.params[name]
        g = store.grads[name]
        m = store._adam_m[name]
        v = store._adam_v[name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return store
