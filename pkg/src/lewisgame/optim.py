"""Plain SGD and Adam updates plus global gradient-norm clipping."""

from __future__ import annotations

import math

import numpy as np

from .params import ParameterSet
from .tensor import F32

# slack keeps a second clip call from rescaling by one ulp
_CLIP_SLACK = 1e-6


def grad_global_norm(params: ParameterSet) -> float:
    """L2 norm over every populated gradient in the set."""
    total = 0.0
    for _, t in params.items():
        if t.grad is not None:
            total += float(np.dot(t.grad, t.grad))
    return math.sqrt(total)


def clip_global_norm(params: ParameterSet, max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most ``max_norm``.

    Returns the scale applied (1.0 when no clipping was needed). The
    comparison carries a tiny slack so clipping is idempotent.
    """
    if max_norm <= 0:
        raise ValueError("clip_global_norm: max_norm must be positive")
    norm = grad_global_norm(params)
    if norm <= max_norm * (1.0 + _CLIP_SLACK):
        return 1.0
    scale = F32(max_norm / norm)
    for _, t in params.items():
        if t.grad is not None:
            t.grad *= scale
    return float(scale)


class Sgd:
    """Vanilla stochastic gradient descent."""

    kind = "sgd"

    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, params: ParameterSet) -> None:
        lr = F32(self.lr)
        for _, t in params.items():
            if t.grad is not None:
                t.data -= lr * t.grad

    def state_arrays(self) -> dict:
        return {}

    def load_state_arrays(self, arrays: dict) -> None:
        pass


class Adam:
    """Adam with bias-corrected first/second moments.

    Moment buffers appear lazily per parameter name, starting at zero.
    """

    kind = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: ParameterSet) -> None:
        self.t += 1
        b1, b2 = F32(self.beta1), F32(self.beta2)
        one = F32(1)
        c1 = F32(1.0 - self.beta1 ** self.t)
        c2 = F32(1.0 - self.beta2 ** self.t)
        lr, eps = F32(self.lr), F32(self.eps)
        for name, t in params.items():
            g = t.grad
            if g is None:
                continue
            if name not in self._m:
                self._m[name] = np.zeros(t.size, F32)
                self._v[name] = np.zeros(t.size, F32)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (one - b1) * g
            v *= b2
            v += (one - b2) * g * g
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def state_arrays(self) -> dict:
        out = {"t": np.array([self.t], F32)}
        for name in self._m:
            out[f"m.{name}"] = self._m[name]
            out[f"v.{name}"] = self._v[name]
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        self._m.clear()
        self._v.clear()
        self.t = 0
        for key, arr in arrays.items():
            if key == "t":
                self.t = int(arr[0])
            elif key.startswith("m."):
                self._m[key[2:]] = arr.astype(F32, copy=True)
            elif key.startswith("v."):
                self._v[key[2:]] = arr.astype(F32, copy=True)
            else:
                raise ValueError(f"unknown optimizer state key: {key!r}")


def make_optimizer(kind: str, lr: float, **hyper):
    """Build an optimizer by name ('sgd' or 'adam')."""
    if kind == "sgd":
        return Sgd(lr)
    if kind == "adam":
        return Adam(lr, **hyper)
    raise ValueError(f"unknown optimizer kind: {kind!r}")
