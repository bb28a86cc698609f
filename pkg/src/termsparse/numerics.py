"""Dense kernels, Adam, the finite-difference oracle and checkpoint I/O.

Everything is float64. Matrices are plain ``numpy.ndarray`` values; the
backward helpers take the cache returned by the matching forward.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NumericalError(ArithmeticError):
    """Non-finite values reached the optimizer or a loss."""


def gelu(x):
    """Exact GELU, ``x * Phi(x)``, with Phi the standard normal CDF."""
    if np.isscalar(x):
        return x * 0.5 * (1.0 + math.erf(x / _SQRT2))
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def relu(x):
    return np.maximum(x, 0.0)


def layer_norm(v, gamma, beta, eps: float = 1e-5):
    """Normalize over the last axis with population variance, then scale and shift."""
    v = np.asarray(v, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if v.shape[-1] != gamma.shape[-1] or v.shape[-1] != beta.shape[-1]:
        raise ValueError(f"layer_norm length mismatch: {v.shape[-1]}, {gamma.shape[-1]}, {beta.shape[-1]}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    out, _ = layer_norm_fwd(v, gamma, beta, eps)
    return out


def layer_norm_fwd(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_bwd(dy, cache):
    """Return (dx, dgamma, dbeta); dgamma/dbeta are summed over leading axes."""
    xhat, rstd, gamma = cache
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    dxhat = dy * gamma
    n = xhat.shape[-1]
    dx = rstd / n * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def linear(x, W, b=None):
    """``x @ W.T + b`` for a vector or a stack of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, W {W.shape}")
    y = x @ W.T
    if b is not None:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (W.shape[0],):
            raise ValueError(f"linear bias shape {b.shape}, expected ({W.shape[0]},)")
        y = y + b
    return y


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def logaddexp(a: float, b: float) -> float:
    return float(np.logaddexp(a, b))


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place.

    Only the keys present in ``grads`` are updated, which is how frozen
    parameter groups are kept untouched.

    Raises:
        NumericalError: if any gradient entry is non-finite ("gradient overflow").
    """
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError("betas must lie in [0, 1)")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericalError("gradient overflow")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# --------------------------------------------------------------------------
# Finite differences
# --------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], params, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    ``params`` is copied; ``coords`` restricts the estimate to a subset of
    flat indices (other entries are returned as 0).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.array(params, dtype=np.float64, copy=True)
    flat = theta.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(theta)
        flat[i] = orig - h
        fm = f(theta)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(theta.shape)


# --------------------------------------------------------------------------
# Checkpoint file
# --------------------------------------------------------------------------

CKPT_MAGIC = b"SPTM"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write tensors as little-endian records.

    Layout: magic ``SPTM``, u32 version, u32 tensor count, then per tensor
    u32 name length, name bytes, u64 rows, u64 cols, rows*cols f64.
    One-dimensional tensors are written as a single row.
    """
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim == 1:
                arr = arr[None, :]
            if arr.ndim != 2:
                raise ValueError(f"tensor {name} must be 1-D or 2-D")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<QQ", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as a dict of 2-D float64 arrays."""
    data = open(path, "rb").read()

    def need(off, n):
        if off + n > len(data):
            raise ValueError("bad checkpoint file: truncated")

    need(0, 12)
    if data[:4] != CKPT_MAGIC:
        raise ValueError("bad checkpoint file: magic")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"bad checkpoint file: version {version}")
    off = 12
    out = {}
    for _ in range(count):
        need(off, 4)
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        need(off, nlen + 16)
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        rows, cols = struct.unpack_from("<QQ", data, off)
        off += 16
        nbytes = rows * cols * 8
        need(off, nbytes)
        out[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64)
        off += nbytes
    if off != len(data):
        raise ValueError("bad checkpoint file: trailing bytes")
    return out
