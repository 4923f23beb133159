"""Dense-tensor kernel layer.

Tensors are plain ``numpy`` arrays (float32 on the inference path). Every
trainable operation has a hand-written backward here or next to its forward,
and :func:`grad_check` is the finite-difference harness the test-suite runs
against each of them.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from ._backend import kernels

GEM_EPS = 1e-6
NORM_EPS = 1e-12
GN_EPS = 1e-5
MAX_RANK = 6


class ShapeError(ValueError):
    pass


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Validate the tensor invariants (rank <= 6, every extent >= 1)."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim == 0 or arr.ndim > MAX_RANK:
        raise ShapeError(f"tensor rank must be in [1, {MAX_RANK}], got {arr.ndim}")
    if any(n < 1 for n in arr.shape):
        raise ShapeError(f"degenerate shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# bilinear resize


@functools.lru_cache(maxsize=256)
def _interp_matrix64(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    m.setflags(write=False)
    return m


def interp_matrix(n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix of 1D linear interpolation weights.

    Half-pixel (align-corners=false) coordinate mapping, source coordinates
    clamped at the border.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError("degenerate shape")
    return _interp_matrix64(n_in, n_out).astype(dtype)


def resize_bilinear(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a ``C x H x W`` grid to ``C x out_h x out_w``."""
    if src.ndim != 3 or min(src.shape) < 1:
        raise ShapeError("degenerate shape")
    if out_h < 1 or out_w < 1:
        raise ShapeError("degenerate shape")
    _, h, w = src.shape
    if (h, w) == (out_h, out_w):
        return src.copy()
    rh = interp_matrix(h, out_h, src.dtype)
    rw = interp_matrix(w, out_w, src.dtype)
    return np.ascontiguousarray(np.matmul(np.matmul(rh, src), rw.T))


def resize_bilinear_backward(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    _, out_h, out_w = grad.shape
    if (in_h, in_w) == (out_h, out_w):
        return grad.copy()
    rh = interp_matrix(in_h, out_h, grad.dtype)
    rw = interp_matrix(in_w, out_w, grad.dtype)
    return np.matmul(np.matmul(rh.T, grad), rw)


# ---------------------------------------------------------------------------
# 2D convolution


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_conv(x, k, stride, pad):
    if x.ndim != 3 or k.ndim != 4:
        raise ShapeError(f"conv2d expects C x H x W input and 4D kernel, got {x.shape}, {k.shape}")
    if x.shape[0] != k.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[0]}, kernel expects {k.shape[1]}")
    kh, kw = k.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("kernel extents must be odd")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    if _conv_out(x.shape[1], kh, stride, pad) < 1 or _conv_out(x.shape[2], kw, stride, pad) < 1:
        raise ShapeError("conv2d output would be empty")


def conv2d(x: np.ndarray, k: np.ndarray, stride: int = 1, pad: int = 0, bias=None) -> np.ndarray:
    """Cross-correlation of ``Cin x H x W`` input with ``Cout x Cin x kh x kw`` kernel."""
    _check_conv(x, k, stride, pad)
    return conv2d_batched(x[..., None], k, stride, pad, bias)[..., 0]


def conv2d_backward(x, k, gy, stride=1, pad=0):
    """Returns ``(grad_x, grad_kernel, grad_bias)``."""
    gx, gk, gb = conv2d_batched_backward(x[..., None], k, gy[..., None], stride, pad)
    return gx[..., 0], gk, gb


def conv2d_batched(x: np.ndarray, k: np.ndarray, stride: int = 1, pad: int = 0, bias=None) -> np.ndarray:
    """:func:`conv2d` over a trailing batch axis: ``Cin x H x W x B`` in, ``Cout x H' x W' x B`` out."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d_batched expects C x H x W x B input, got {x.shape}")
    _check_conv(x[..., 0], k, stride, pad)
    y = kernels.conv2d_forward(np.ascontiguousarray(x), k.astype(x.dtype, copy=False), stride, pad)
    if bias is not None:
        y += np.asarray(bias, dtype=x.dtype)[:, None, None, None]
    return y


def conv2d_batched_backward(x, k, gy, stride=1, pad=0):
    """Returns ``(grad_x, grad_kernel, grad_bias)``; kernel and bias grads are summed over the batch."""
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy, dtype=x.dtype)
    gx = kernels.conv2d_backward_input(gy, k.astype(x.dtype, copy=False), x.shape[1], x.shape[2], stride, pad)
    gk = kernels.conv2d_backward_weight(x, gy, k.shape[2], k.shape[3], stride, pad)
    return gx, gk, gy.sum(axis=(1, 2, 3))


# ---------------------------------------------------------------------------
# pooling and normalization


def gem_pool(x: np.ndarray, p: float, eps: float = GEM_EPS) -> np.ndarray:
    """Generalized-mean pooling over the spatial axes of ``C x H x W``."""
    if x.ndim != 3:
        raise ShapeError(f"gem_pool expects C x H x W, got {x.shape}")
    if p < 1:
        raise ValueError("GeM power must be >= 1")
    xc = np.maximum(x, eps)
    m = np.mean(xc.reshape(x.shape[0], -1) ** p, axis=1)
    return (m ** (1.0 / p)).astype(x.dtype)


def gem_pool_backward(x, p, gy, eps=GEM_EPS):
    """Returns ``(grad_x, grad_p)``."""
    c = x.shape[0]
    xc = np.maximum(x, eps).reshape(c, -1)
    n = xc.shape[1]
    xp = xc ** p
    m = xp.mean(axis=1)
    y = m ** (1.0 / p)
    # dy/dx_i = m^(1/p - 1) * x_i^(p-1) / n, zero where the clamp is active
    dx = (y / m)[:, None] * xc ** (p - 1) / n
    dx = np.where(x.reshape(c, -1) > eps, dx, 0.0)
    dm_dp = (xp * np.log(xc)).mean(axis=1)
    dy_dp = y * (-np.log(m) / p**2 + dm_dp / (p * m))
    return (gy[:, None] * dx).reshape(x.shape).astype(x.dtype), float(np.sum(gy * dy_dp))


def l2_normalize(x: np.ndarray, eps: float = NORM_EPS, with_flag: bool = False):
    """Scale ``x`` to unit Euclidean norm.

    Near-zero input (norm <= eps) maps to the zero vector; ``with_flag=True``
    additionally returns whether that happened.
    """
    n = float(np.sqrt(np.sum(np.square(x, dtype=np.float64))))
    degenerate = n <= eps
    y = np.zeros_like(x) if degenerate else (x / np.asarray(n, dtype=x.dtype)).astype(x.dtype)
    return (y, degenerate) if with_flag else y


def l2_normalize_backward(x, gy, eps=NORM_EPS):
    n = np.sqrt(np.sum(x * x))
    if n <= eps:
        return np.zeros_like(x)
    y = x / n
    return (gy - y * np.dot(y, gy)) / n


def group_norm(x: np.ndarray, gamma, beta, groups: int, eps: float = GN_EPS):
    """Group normalization of a ``C x ... x N`` tensor, statistics per trailing sample.

    Returns ``(y, cache)``.
    """
    c = x.shape[0]
    n = x.shape[-1]
    xg = x.reshape(groups, -1, n)
    mean = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv).reshape(x.shape)
    bshape = (c,) + (1,) * (x.ndim - 1)
    y = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return y.astype(x.dtype, copy=False), (xhat, inv, groups)


def group_norm_backward(gy, gamma, cache):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv, groups = cache
    c = gy.shape[0]
    n = gy.shape[-1]
    red = tuple(range(1, gy.ndim))
    ggamma = np.sum(gy * xhat, axis=red)
    gbeta = np.sum(gy, axis=red)
    bshape = (c,) + (1,) * (gy.ndim - 1)
    gxhat = (gy * gamma.reshape(bshape)).reshape(groups, -1, n)
    xh = xhat.reshape(groups, -1, n)
    gx = inv * (gxhat - gxhat.mean(axis=1, keepdims=True) - xh * (gxhat * xh).mean(axis=1, keepdims=True))
    return gx.reshape(gy.shape).astype(gy.dtype, copy=False), ggamma, gbeta


# ---------------------------------------------------------------------------
# finite-difference gradient check


@dataclass(frozen=True)
class GradCheckReport:
    max_abs_diff: float
    max_rel_diff: float
    probe_count: int

    def ok(self, rel_tol: float) -> bool:
        return self.max_rel_diff < rel_tol


def grad_check(f, x: np.ndarray, analytic_grad: np.ndarray, eps: float = 1e-3,
               probes: int = 20, rng=None, rel_floor: float = 1e-3) -> GradCheckReport:
    """Compare ``analytic_grad`` with central differences of scalar ``f`` at ``x``.

    ``f`` is called with a perturbed copy of ``x``; non-scalar outputs are
    sum-reduced. Relative error at a probe is ``|fd - an| / max(|fd|, |an|, floor)``
    with ``floor = rel_floor * max|analytic_grad|``, so coordinates whose
    gradient is negligible next to the tensor's largest entry are judged on the
    tensor's own scale.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-4, 1e-2]")
    if analytic_grad.shape != x.shape:
        raise ShapeError(f"gradient shape {analytic_grad.shape} does not match {x.shape}")
    rng = np.random.default_rng(0) if rng is None else rng
    count = max(1, min(probes, x.size))
    idx = rng.choice(x.size, size=count, replace=False)
    an_flat = analytic_grad.reshape(-1)
    floor = max(rel_floor * float(np.max(np.abs(an_flat))), 1e-12)

    def value(arr):
        v = float(np.sum(f(arr)))
        if not math.isfinite(v):
            raise FloatingPointError("non-finite function value during gradient check")
        return v

    max_abs = max_rel = 0.0
    for i in idx:
        xp = x.copy()
        xp.reshape(-1)[i] += eps
        xm = x.copy()
        xm.reshape(-1)[i] -= eps
        fd = (value(xp) - value(xm)) / (2 * eps)
        an = float(an_flat[i])
        diff = abs(fd - an)
        max_abs = max(max_abs, diff)
        max_rel = max(max_rel, diff / max(abs(fd), abs(an), floor))
    return GradCheckReport(max_abs, max_rel, int(count))
