"""Core dense-tensor helpers: checked construction, per-cell linear maps,
and the small numeric kernels (softmax, layer norm, bilinear sampling,
sinusoidal encoding) shared by every other module.

Tensors are plain numpy float64 arrays in checked/test mode; float32 is
allowed on the bench path. The finite-difference gradient here is the
verification oracle for every analytic gradient in the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var, val

LN_EPS = 1e-5


def as_tensor(data, dtype=np.float64, checked=True):
    """Copy `data` into a read-only ndarray, rejecting NaN/Inf when checked."""
    arr = np.array(data, dtype=dtype)
    if checked and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LinearMap:
    """A dense affine map y = W x + b (the per-cell realization of every
    1x1 conv / linear generator in the pipeline)."""

    weight: object  # [out, in] ndarray (or Var during fitting)
    bias: object    # [out]

    def __post_init__(self):
        w, b = val(self.weight), val(self.bias)
        if np.ndim(w) != 2 or np.ndim(b) != 1 or w.shape[0] != b.shape[0]:
            raise ValueError(
                f"inconsistent LinearMap shapes: weight {np.shape(w)}, bias {np.shape(b)}")

    @property
    def in_dim(self):
        return val(self.weight).shape[1]

    @property
    def out_dim(self):
        return val(self.weight).shape[0]

    @classmethod
    def zeros(cls, out_dim, in_dim):
        return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim))

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n), np.zeros(n))


def linear_apply(m: LinearMap, x):
    """Apply an affine map to a vector [in] or a batch [N, in]."""
    vx = val(x)
    if np.shape(vx)[-1] != m.in_dim:
        raise ValueError(
            f"linear_apply: input dim {np.shape(vx)[-1]} != map in_dim {m.in_dim}")
    if np.ndim(vx) == 1:
        return ad.add(ad.matmul(m.weight, x), m.bias)
    if np.ndim(vx) == 2:
        return ad.add(ad.matmul(x, ad.transpose(m.weight)), m.bias)
    raise ValueError("linear_apply expects a 1-D or 2-D input")


def softmax(v):
    """Softmax along the last axis; positive entries summing to 1."""
    if np.size(val(v)) == 0:
        raise ValueError("softmax of an empty tensor")
    return ad.softmax(v, axis=-1)


def layer_norm(v, eps=LN_EPS):
    """Zero-mean unit-variance normalization of the last axis, no affine."""
    if np.shape(val(v))[-1] < 2:
        raise ValueError("layer_norm needs at least 2 elements")
    return ad.layer_norm(v, eps=eps)


def relu(v):
    return ad.relu(v)


def bilinear_sample(fmap, p):
    """Bilinear sample of a [C, H, W] map at a single continuous point.

    p = (x, y) with x indexing columns and y indexing rows. Points outside
    the closed box [0, W-1] x [0, H-1] return (zeros, False): zero-padding
    semantics, so out-of-frustum projections contribute nothing.

    Returns (feature [C], valid flag).
    """
    fmap = np.asarray(fmap)
    C, H, W = fmap.shape
    x, y = float(p[0]), float(p[1])
    if not (0.0 <= x <= W - 1 and 0.0 <= y <= H - 1):
        return np.zeros(C, dtype=fmap.dtype), False
    x0 = min(int(np.floor(x)), W - 2) if W > 1 else 0
    y0 = min(int(np.floor(y)), H - 2) if H > 1 else 0
    x1 = min(x0 + 1, W - 1)
    y1 = min(y0 + 1, H - 1)
    fx = x - x0
    fy = y - y0
    out = (fmap[:, y0, x0] * (1 - fx) * (1 - fy)
           + fmap[:, y0, x1] * fx * (1 - fy)
           + fmap[:, y1, x0] * (1 - fx) * fy
           + fmap[:, y1, x1] * fx * fy)
    return out, True


def sinusoid_freqs(dim):
    """Angular frequencies for one axis block of sinusoidal_encode."""
    if dim % 4 != 0 or dim <= 0:
        raise ValueError("encoding dim must be a positive multiple of 4")
    half = dim // 2
    k = np.arange(dim // 4)
    return np.power(10000.0, -2.0 * k / half)


def sinusoidal_encode(p, dim):
    """Sinusoidal position encoding of a 2-D point normalized to [0, 1]^2.

    Layout: dim/2 entries per axis (x block then y block); within a block,
    sin/cos interleaved per frequency, frequencies 10000^(-2k/(dim/2)).
    """
    freqs = sinusoid_freqs(dim)
    out = np.empty(dim)
    for axis, coord in enumerate(p):
        phase = float(coord) * freqs
        block = np.empty(dim // 2)
        block[0::2] = np.sin(phase)
        block[1::2] = np.cos(phase)
        out[axis * (dim // 2):(axis + 1) * (dim // 2)] = block
    return out


def finite_diff_grad(f, x, eps=1e-6):
    """Central-difference gradient of a scalar function of a tensor.

    The independent numeric oracle checked against every analytic gradient.
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    for i in range(x.size):
        xp = x.copy().ravel()
        xm = x.copy().ravel()
        xp[i] += eps
        xm[i] -= eps
        fp = float(f(xp.reshape(x.shape)))
        fm = float(f(xm.reshape(x.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("non-finite function evaluation in finite_diff_grad")
        flat[i] = (fp - fm) / (2.0 * eps)
    return grad
