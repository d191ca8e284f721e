"""Differentiable building blocks for training binary networks.

Activation binarization uses sign in the forward pass and one of two
surrogate derivatives in the backward pass: the step function of
clip(-1, x, 1), or the triangle-shaped derivative of the second-order
piecewise polynomial

    F(x) = -1             x < -1
           2x + x^2       -1 <= x < 0
           2x - x^2       0 <= x < 1
           1              x >= 1

At the kinks the right-hand branch is used.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .tensor import sign

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class SurrogateKind(str, enum.Enum):
    CLIP_STE = "clip_ste"
    PIECEWISE_POLY = "piecewise_poly"


# --- activation surrogates -------------------------------------------------


def poly_forward(a):
    a = np.asarray(a)
    c = np.clip(a, -1.0, 1.0)
    return c * (2 - np.abs(c))


def poly_derivative(a):
    # 2 - 2|a| on [-1, 1), clamped to 0 outside; both kinks at +-1 give 0
    return np.maximum(2 - 2 * np.abs(np.asarray(a)), 0)


def poly_backward(a, grad_out):
    return grad_out * poly_derivative(a)


def clip_ste_backward(a, grad_out):
    a = np.asarray(a)
    return grad_out * (np.abs(a) < 1)


def sign_backward(a, grad_out, kind: SurrogateKind):
    if SurrogateKind(kind) is SurrogateKind.PIECEWISE_POLY:
        return poly_backward(a, grad_out)
    return clip_ste_backward(a, grad_out)


def clip_forward(a):
    return np.clip(a, -1.0, 1.0)


def clip_backward(a, grad_out):
    return clip_ste_backward(a, grad_out)


def relu_forward(a):
    return np.maximum(a, 0)


def relu_backward(a, grad_out):
    return grad_out * (a > 0)


def _surrogate_fn(kind):
    if SurrogateKind(kind) is SurrogateKind.PIECEWISE_POLY:
        return poly_forward
    return clip_forward


def approximation_area(kind, lo=-1.0, hi=1.0, pieces=64):
    """Area between sign and the surrogate's forward function on [lo, hi].

    Composite 8-point Gauss-Legendre on subintervals split at -1, 0 and 1;
    both surrogates are polynomial on each piece so this is exact up to
    rounding.
    """
    fn = _surrogate_fn(kind)
    nodes, weights = np.polynomial.legendre.leggauss(8)
    edges = np.linspace(lo, hi, pieces + 1)
    kinks = [k for k in (-1.0, 0.0, 1.0) if lo < k < hi]
    edges = np.union1d(edges, kinks)
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        x = 0.5 * (b - a) * nodes + 0.5 * (a + b)
        total += 0.5 * (b - a) * np.sum(weights * np.abs(fn(x) - sign(x)))
    return float(total)


# --- weight binarization ---------------------------------------------------


def kernel_scale(w_r, scope="kernel"):
    """Mean absolute value per output kernel (or over the whole layer)."""
    w_r = np.asarray(w_r)
    if scope == "layer":
        return np.full((w_r.shape[0],) + (1,) * (w_r.ndim - 1), np.abs(w_r).mean(), dtype=w_r.dtype)
    axes = tuple(range(1, w_r.ndim))
    return np.abs(w_r).mean(axis=axes, keepdims=True)


def magnitude_aware_binarize(w_r, scope="kernel"):
    """scale_o * sign(w_r[o]) with scale_o the L1 mean of kernel o."""
    return kernel_scale(w_r, scope) * sign(w_r)


def magnitude_aware_backward(w_r, grad_wbar):
    """Gradient w.r.t. the real weights: the scaled sign is treated as the
    identity inside |w| < 1 and flat outside."""
    return grad_wbar * (np.abs(w_r) < 1)


def original_ste_backward(w_r, grad_wb):
    return grad_wb * (np.abs(w_r) <= 1)


def scaled_poly_weight(w_r, scope="kernel"):
    """Smooth stand-in for the scaled sign: scale * F(w_r)."""
    return kernel_scale(w_r, scope) * poly_forward(w_r)


def scaled_poly_weight_backward(w_r, grad, scope="kernel"):
    """Exact derivative of ``scaled_poly_weight``."""
    w_r = np.asarray(w_r)
    s = kernel_scale(w_r, scope)
    f = poly_forward(w_r)
    direct = grad * s * poly_derivative(w_r)
    if scope == "layer":
        through_scale = np.sum(grad * f) * sign(w_r) / w_r.size
    else:
        axes = tuple(range(1, w_r.ndim))
        n = int(np.prod(w_r.shape[1:]))
        through_scale = np.sum(grad * f, axis=axes, keepdims=True) * sign(w_r) / n
    return direct + through_scale


# --- batch norm ------------------------------------------------------------


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def create(cls, channels, dtype=np.float32):
        return cls(
            np.ones(channels, dtype),
            np.zeros(channels, dtype),
            np.zeros(channels, dtype),
            np.ones(channels, dtype),
        )

    @property
    def channels(self):
        return self.gamma.shape[0]


def _bshape(x):
    return (1, -1) + (1,) * (x.ndim - 2)


def _axes(x):
    return (0,) + tuple(range(2, x.ndim))


def batchnorm_forward(x, bn: BatchNormParams, mode="train"):
    """Returns (y, cache). In train mode the cache carries the batch
    statistics; apply them with ``update_running_stats``."""
    if x.shape[1] != bn.channels:
        raise ValueError(f"batchnorm: {x.shape[1]} channels, params have {bn.channels}")
    shp = _bshape(x)
    if mode == "train":
        axes = _axes(x)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    elif mode == "eval":
        mean, var = bn.running_mean, bn.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    invstd = (1.0 / np.sqrt(var + bn.eps)).astype(x.dtype)
    xhat = (x - mean.reshape(shp).astype(x.dtype)) * invstd.reshape(shp)
    y = xhat * bn.gamma.reshape(shp) + bn.beta.reshape(shp)
    count = x.size // x.shape[1]
    return y, {"mode": mode, "xhat": xhat, "invstd": invstd, "mean": mean, "var": var, "count": count}


def batchnorm_backward(grad_y, cache, bn: BatchNormParams):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    shp = _bshape(grad_y)
    axes = _axes(grad_y)
    xhat = cache["xhat"]
    grad_beta = grad_y.sum(axis=axes)
    grad_gamma = (grad_y * xhat).sum(axis=axes)
    scale = (bn.gamma * cache["invstd"]).reshape(shp)
    if cache["mode"] == "eval":
        return grad_y * scale, grad_gamma, grad_beta
    m = cache["count"]
    grad_x = scale / m * (m * grad_y - grad_beta.reshape(shp) - xhat * grad_gamma.reshape(shp))
    return grad_x, grad_gamma, grad_beta


def update_running_stats(bn: BatchNormParams, cache):
    m = cache["count"]
    unbiased = cache["var"] * (m / max(m - 1, 1))
    mom = bn.momentum
    bn.running_mean[...] = (1 - mom) * bn.running_mean + mom * cache["mean"]
    bn.running_var[...] = (1 - mom) * bn.running_var + mom * unbiased


# --- SGD -------------------------------------------------------------------


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, state: SgdState):
    """Momentum SGD, in place: v <- m*v + g (+ wd*p); p <- p - lr*v.

    Only names present in ``grads`` are touched.
    """
    lr = state.learning_rate
    for name, g in grads.items():
        p = params[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        buf = state.buffers.get(name)
        if buf is None:
            buf = state.buffers[name] = np.zeros_like(p)
        buf *= state.momentum
        buf += g
        p -= (lr * buf).astype(p.dtype, copy=False)
    return params
