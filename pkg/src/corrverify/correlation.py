"""Feature pyramids, scale-wise channel reduction and cross-scale correlation."""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    ShapeError,
    conv2d,
    conv2d_backward,
    conv2d_batched,
    conv2d_batched_backward,
    interp_matrix,
    resize_bilinear,
)

SCALE_STEP = 1.0 / math.sqrt(2.0)


@dataclass
class FeaturePyramid:
    levels: list
    scales: list

    def __len__(self):
        return len(self.levels)

    @property
    def channels(self) -> int:
        return self.levels[0].shape[0]


@dataclass
class ReducerWeights:
    kernels: list  # S tensors of shape C'_l x C_l x 3 x 3
    biases: list

    def __len__(self):
        return len(self.kernels)


@dataclass
class CrossScaleCorrelation:
    volume: np.ndarray  # S^2 x Hq x Wq x Hk x Wk
    query_id: object = None
    key_id: object = None

    @property
    def num_scales(self) -> int:
        return int(round(math.sqrt(self.volume.shape[0])))

    def transposed(self) -> "CrossScaleCorrelation":
        """The same correlation seen from the key side."""
        return CrossScaleCorrelation(transpose_volume(self.volume), self.key_id, self.query_id)


def check_feature_map(f: np.ndarray, min_extent: int = 1) -> None:
    if f.ndim != 3:
        raise ShapeError(f"feature map must be C x H x W, got shape {f.shape}")
    if f.shape[1] < min_extent or f.shape[2] < min_extent:
        raise ShapeError(f"feature map {f.shape} smaller than {min_extent}x{min_extent}")
    if not np.all(np.isfinite(f)):
        raise ValueError("feature map contains non-finite values")


def _round_half_up(v: float) -> int:
    # 1e-9 absorbs representation error at exact .5 (e.g. 7 / sqrt(2) * sqrt(2)).
    return int(math.floor(v + 0.5 + 1e-9))


def pyramid_extents(h: int, w: int, num_scales: int):
    out = []
    for s in range(num_scales):
        scale = SCALE_STEP**s
        out.append((_round_half_up(scale * h), _round_half_up(scale * w)))
    return out


def build_pyramid(f: np.ndarray, num_scales: int) -> FeaturePyramid:
    """Resize ``f`` by powers of 1/sqrt(2); level 0 is ``f`` itself."""
    if num_scales < 1:
        raise ValueError("num_scales must be >= 1")
    check_feature_map(f)
    _, h, w = f.shape
    levels, scales = [], []
    for s, (hs, ws) in enumerate(pyramid_extents(h, w, num_scales)):
        if hs < 1 or ws < 1:
            raise ShapeError("pyramid too deep")
        levels.append(f.copy() if s == 0 else resize_bilinear(f, hs, ws))
        scales.append(SCALE_STEP**s)
    return FeaturePyramid(levels, scales)


def init_reducer(num_scales: int, in_channels: int, out_channels: int, rng, dtype=np.float32) -> ReducerWeights:
    std = math.sqrt(2.0 / (in_channels * 9))
    kernels = [(rng.standard_normal((out_channels, in_channels, 3, 3)) * std).astype(dtype)
               for _ in range(num_scales)]
    biases = [np.full(out_channels, 0.01, dtype=dtype) for _ in range(num_scales)]
    return ReducerWeights(kernels, biases)


def reduce_scalewise(pyr: FeaturePyramid, w: ReducerWeights, keep: bool = False):
    """Per-level 3x3 conv (stride 1, pad 1) followed by ReLU.

    With ``keep=True`` returns ``(pyramid, cache)`` for :func:`reduce_scalewise_backward`.
    """
    if len(w) != len(pyr):
        raise ShapeError(f"{len(w)} reducer kernels for {len(pyr)} pyramid levels")
    levels, pre = [], []
    for f, k, b in zip(pyr.levels, w.kernels, w.biases):
        if k.shape[1] != f.shape[0]:
            raise ShapeError(f"reducer expects {k.shape[1]} channels, level has {f.shape[0]}")
        z = conv2d(f, k, stride=1, pad=1, bias=b)
        pre.append(z)
        levels.append(np.maximum(z, 0))
    out = FeaturePyramid(levels, list(pyr.scales))
    return (out, (pyr, pre)) if keep else out


def reduce_scalewise_backward(grads, w: ReducerWeights, cache) -> ReducerWeights:
    """Accumulate reducer parameter gradients from per-level output gradients."""
    pyr, pre = cache
    gk, gb = [], []
    for f, k, z, g in zip(pyr.levels, w.kernels, pre, grads):
        gz = np.where(z > 0, g, 0).astype(f.dtype)
        _, dk, db = conv2d_backward(f, k, gz, stride=1, pad=1)
        gk.append(dk)
        gb.append(db)
    return ReducerWeights(gk, gb)


def reduce_scalewise_batch(pyrs, w: ReducerWeights, keep: bool = False):
    """:func:`reduce_scalewise` over many pyramids of equal shape, one conv call per level."""
    if not pyrs:
        return ([], None) if keep else []
    s = len(pyrs[0])
    if len(w) != s or any(len(p) != s for p in pyrs):
        raise ShapeError("reducer depth and pyramid depths must agree")
    outs = [[] for _ in pyrs]
    stacks, pre = [], []
    for i, (k, b) in enumerate(zip(w.kernels, w.biases)):
        x = np.stack([p.levels[i] for p in pyrs], axis=-1)
        if k.shape[1] != x.shape[0]:
            raise ShapeError(f"reducer expects {k.shape[1]} channels, level has {x.shape[0]}")
        z = conv2d_batched(x, k, stride=1, pad=1, bias=b)
        y = np.maximum(z, 0)
        for j in range(len(pyrs)):
            outs[j].append(y[..., j])
        stacks.append(x)
        pre.append(z)
    out = [FeaturePyramid(levels, list(p.scales)) for levels, p in zip(outs, pyrs)]
    return (out, (stacks, pre)) if keep else out


def reduce_scalewise_batch_backward(grads, w: ReducerWeights, cache) -> ReducerWeights:
    """Reducer gradients summed over the batch; ``grads[j][i]`` is pyramid ``j``, level ``i``."""
    stacks, pre = cache
    gk, gb = [], []
    for i, (x, z) in enumerate(zip(stacks, pre)):
        g = np.stack([gj[i] for gj in grads], axis=-1)
        gz = np.where(z > 0, g, 0).astype(x.dtype)
        _, dk, db = conv2d_batched_backward(x, w.kernels[i], gz, stride=1, pad=1)
        gk.append(dk)
        gb.append(db)
    return ReducerWeights(gk, gb)


# ---------------------------------------------------------------------------
# correlation


def _unit_columns(f):
    c = f.shape[0]
    a = f.reshape(c, -1)
    n = np.sqrt(np.sum(a * a, axis=0))
    safe = np.where(n > 0, n, 1)
    return a / safe, n


def correlate(fq: np.ndarray, fk: np.ndarray) -> np.ndarray:
    """ReLU of cosine similarity between every query and key position.

    Returns ``Hq x Wq x Hk x Wk``; zero-norm positions correlate to 0.
    """
    if fq.shape[0] != fk.shape[0]:
        raise ShapeError(f"channel mismatch: {fq.shape[0]} vs {fk.shape[0]}")
    uq, _ = _unit_columns(fq)
    uk, _ = _unit_columns(fk)
    c = np.maximum(uq.T @ uk, 0)
    return c.reshape(fq.shape[1:] + fk.shape[1:])


def _through_norm(u, n, du):
    """Backprop from unit columns ``u = a / n`` to the raw columns ``a``."""
    proj = np.sum(u * du, axis=0, keepdims=True)
    d = (du - u * proj) / np.where(n > 0, n, 1)
    return np.where(n > 0, d, 0)


def correlate_backward(fq, fk, g):
    """Gradients of :func:`correlate` wrt both feature maps."""
    uq, nq = _unit_columns(fq)
    uk, nk = _unit_columns(fk)
    cos = uq.T @ uk
    gm = np.where(cos > 0, g.reshape(cos.shape), 0).astype(fq.dtype)
    return (_through_norm(uq, nq, uk @ gm.T).reshape(fq.shape),
            _through_norm(uk, nk, uq @ gm).reshape(fk.shape))


@functools.lru_cache(maxsize=64)
def _interp2(h_in, w_in, h_out, w_out, dtype):
    """Bilinear resize of a flattened ``h_in x w_in`` grid as one ``(h_out*w_out, h_in*w_in)`` matrix."""
    m = np.kron(interp_matrix(h_in, h_out, np.float64), interp_matrix(w_in, w_out, np.float64))
    return m.astype(dtype)


def _upsample4(c, hq, wq, hk, wk):
    a, b, cc, d = c.shape
    rq = _interp2(a, b, hq, wq, c.dtype)
    rk = _interp2(cc, d, hk, wk, c.dtype)
    return (rq @ c.reshape(a * b, cc * d) @ rk.T).reshape(hq, wq, hk, wk)


def _upsample4_backward(g, a, b, cc, d):
    hq, wq, hk, wk = g.shape
    rq = _interp2(a, b, hq, wq, g.dtype)
    rk = _interp2(cc, d, hk, wk, g.dtype)
    return (rq.T @ g.reshape(hq * wq, hk * wk) @ rk).reshape(a, b, cc, d)


def assemble_cross_scale(pq: FeaturePyramid, pk: FeaturePyramid, query_id=None, key_id=None) -> CrossScaleCorrelation:
    """Stack the S^2 level-pair correlations, each resized to the level-0 grids.

    Slice ``sq * S + sk`` holds query level ``sq`` against key level ``sk``.
    """
    s = len(pq)
    if len(pk) != s:
        raise ShapeError(f"pyramids differ in depth: {s} vs {len(pk)}")
    _, hq, wq = pq.levels[0].shape
    _, hk, wk = pk.levels[0].shape
    vol = np.empty((s * s, hq, wq, hk, wk), dtype=pq.levels[0].dtype)
    uq = [_unit_columns(f)[0] for f in pq.levels]
    uk = [_unit_columns(f)[0] for f in pk.levels]
    for sq in range(s):
        for sk in range(s):
            c = np.maximum(uq[sq].T @ uk[sk], 0)
            c = c.reshape(pq.levels[sq].shape[1:] + pk.levels[sk].shape[1:])
            vol[sq * s + sk] = c if c.shape == (hq, wq, hk, wk) else _upsample4(c, hq, wq, hk, wk)
    return CrossScaleCorrelation(vol, query_id, key_id)


def assemble_cross_scale_backward(pq: FeaturePyramid, pk: FeaturePyramid, gvol: np.ndarray):
    """Gradients wrt every level of both pyramids, as two lists."""
    s = len(pq)
    nq = [_unit_columns(f) for f in pq.levels]
    nk = [_unit_columns(f) for f in pk.levels]
    duq = [np.zeros_like(u) for u, _ in nq]
    duk = [np.zeros_like(u) for u, _ in nk]
    for sq in range(s):
        for sk in range(s):
            uq, uk = nq[sq][0], nk[sk][0]
            g = gvol[sq * s + sk]
            shape = pq.levels[sq].shape[1:] + pk.levels[sk].shape[1:]
            if g.shape != shape:
                g = _upsample4_backward(g, *shape)
            cos = uq.T @ uk
            gm = np.where(cos > 0, g.reshape(cos.shape), 0).astype(uq.dtype)
            duq[sq] += uk @ gm.T
            duk[sk] += uq @ gm
    # the normalization backward is linear in the incoming gradient, so apply it once per level
    gq = [_through_norm(u, n, d).reshape(f.shape) for (u, n), d, f in zip(nq, duq, pq.levels)]
    gk = [_through_norm(u, n, d).reshape(f.shape) for (u, n), d, f in zip(nk, duk, pk.levels)]
    return gq, gk


def transpose_volume(vol: np.ndarray) -> np.ndarray:
    """Swap query and key roles: scale index (sq, sk) -> (sk, sq) and spatial pairs."""
    s = int(round(math.sqrt(vol.shape[0])))
    v = vol.reshape((s, s) + vol.shape[1:])
    return np.ascontiguousarray(v.transpose(1, 0, 4, 5, 2, 3)).reshape(
        (s * s,) + vol.shape[3:] + vol.shape[1:3])
