"""Center-pivot 4D correlation encoder.

Activations inside the encoder use the layout ``C x Hq x Wq x Hk x Wk x N``
with the pair index innermost, so a batch of correlation volumes runs through
each convolution as one kernel call.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from ._backend import kernels
from .correlation import CrossScaleCorrelation, ReducerWeights, init_reducer
from .numerics import ShapeError, group_norm, group_norm_backward

MAGIC = b"CVW1"
MAX_GROUPS = 4


@dataclass
class CenterPivotKernel:
    query_side: np.ndarray  # Cout x Cin x kh x kw
    key_side: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        kh, kw = self.query_side.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("center-pivot kernel extents must be odd")
        if self.key_side.shape != self.query_side.shape:
            raise ShapeError("query and key kernel slices must share a shape")


@dataclass(frozen=True)
class PairLogit:
    z0: float
    z1: float


@dataclass
class EncoderConfig:
    num_scales: int = 3
    feature_channels: int = 1024
    reduced_channels: int = 256
    block_channels: tuple = (16, 32, 64, 128)
    convs_per_block: int = 2
    mlp_hidden: int = 128

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        if self.num_blocks < 2:
            raise ValueError("encoder needs at least 2 blocks")
        if min(self.block_channels) < 1 or self.convs_per_block < 1 or self.mlp_hidden < 1:
            raise ValueError("encoder widths must be >= 1")
        if self.num_scales < 1:
            raise ValueError("num_scales must be >= 1")

    @property
    def num_blocks(self) -> int:
        return len(self.block_channels)

    def layers(self):
        """``(name, cin, cout, stride)`` for every 4D convolution, in order."""
        out = []
        cin = self.num_scales**2
        for b, cout in enumerate(self.block_channels):
            for j in range(self.convs_per_block):
                last = j == self.convs_per_block - 1
                stride = 2 if last and b < self.num_blocks - 1 else 1
                out.append((f"block{b}.conv{j}", cin, cout, stride))
                cin = cout
        return out


@dataclass
class EncoderWeights:
    config: EncoderConfig
    params: dict = field(default_factory=dict)

    @property
    def reducer(self) -> ReducerWeights:
        s = self.config.num_scales
        return ReducerWeights([self.params[f"reducer.{i}.weight"] for i in range(s)],
                              [self.params[f"reducer.{i}.bias"] for i in range(s)])

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "EncoderWeights":
        return EncoderWeights(self.config, {k: v.astype(dtype) for k, v in self.params.items()})


def expected_shapes(cfg: EncoderConfig) -> dict:
    shapes = {}
    for i in range(cfg.num_scales):
        shapes[f"reducer.{i}.weight"] = (cfg.reduced_channels, cfg.feature_channels, 3, 3)
        shapes[f"reducer.{i}.bias"] = (cfg.reduced_channels,)
    for name, cin, cout, _ in cfg.layers():
        shapes[f"{name}.query"] = (cout, cin, 3, 3)
        shapes[f"{name}.key"] = (cout, cin, 3, 3)
        shapes[f"{name}.bias"] = (cout,)
        shapes[f"{name}.gn.weight"] = (cout,)
        shapes[f"{name}.gn.bias"] = (cout,)
    c_last = cfg.block_channels[-1]
    shapes["mlp.fc1.weight"] = (cfg.mlp_hidden, c_last)
    shapes["mlp.fc1.bias"] = (cfg.mlp_hidden,)
    shapes["mlp.fc2.weight"] = (2, cfg.mlp_hidden)
    shapes["mlp.fc2.bias"] = (2,)
    return shapes


def init_weights(cfg: EncoderConfig, rng, dtype=np.float32) -> EncoderWeights:
    p = {}
    red = init_reducer(cfg.num_scales, cfg.feature_channels, cfg.reduced_channels, rng, dtype)
    for i in range(cfg.num_scales):
        p[f"reducer.{i}.weight"] = red.kernels[i]
        p[f"reducer.{i}.bias"] = red.biases[i]
    for name, cin, cout, _ in cfg.layers():
        # two summed 3x3 slices -> fan-in 2 * cin * 9
        std = math.sqrt(2.0 / (2 * cin * 9))
        p[f"{name}.query"] = (rng.standard_normal((cout, cin, 3, 3)) * std).astype(dtype)
        p[f"{name}.key"] = (rng.standard_normal((cout, cin, 3, 3)) * std).astype(dtype)
        p[f"{name}.bias"] = np.zeros(cout, dtype=dtype)
        p[f"{name}.gn.weight"] = np.ones(cout, dtype=dtype)
        p[f"{name}.gn.bias"] = np.zeros(cout, dtype=dtype)
    c_last = cfg.block_channels[-1]
    p["mlp.fc1.weight"] = (rng.standard_normal((cfg.mlp_hidden, c_last)) * math.sqrt(2.0 / c_last)).astype(dtype)
    p["mlp.fc1.bias"] = np.zeros(cfg.mlp_hidden, dtype=dtype)
    p["mlp.fc2.weight"] = (rng.standard_normal((2, cfg.mlp_hidden)) * math.sqrt(1.0 / cfg.mlp_hidden)).astype(dtype)
    p["mlp.fc2.bias"] = np.zeros(2, dtype=dtype)
    return EncoderWeights(cfg, p)


# ---------------------------------------------------------------------------
# center-pivot 4D convolution


def _cp_forward(x, kq, kk, bias, sq, sk):
    cin, hq, wq, hk, wk, n = x.shape
    if kq.shape[1] != cin:
        raise ShapeError(f"channel mismatch: input has {cin}, kernel expects {kq.shape[1]}")
    cout = kq.shape[0]
    pq, pk = (kq.shape[2] - 1) // 2, (kk.shape[2] - 1) // 2
    kq = kq.astype(x.dtype, copy=False)
    kk = kk.astype(x.dtype, copy=False)

    # query-side slice: key grid held at its (strided) pivot
    xq = np.ascontiguousarray(x[:, :, :, ::sk, ::sk, :])
    hk2, wk2 = xq.shape[3:5]
    yq = kernels.conv2d_forward(xq.reshape(cin, hq, wq, -1), kq, sq, pq)
    hq2, wq2 = yq.shape[1:3]
    yq = yq.reshape(cout, hq2, wq2, hk2, wk2, n)

    # key-side slice: query grid held at its (strided) pivot
    xk = np.ascontiguousarray(x[:, ::sq, ::sq].transpose(0, 3, 4, 1, 2, 5))
    yk = kernels.conv2d_forward(xk.reshape(cin, hk, wk, -1), kk, sk, pk)
    yk = yk.reshape(cout, hk2, wk2, hq2, wq2, n).transpose(0, 3, 4, 1, 2, 5)

    y = yq + yk
    y += bias.astype(x.dtype, copy=False).reshape(cout, 1, 1, 1, 1, 1)
    return y, (xq, xk, x.shape)


def _cp_backward(gy, kq, kk, sq, sk, cache):
    xq, xk, xshape = cache
    cin, hq, wq, hk, wk, n = xshape
    cout, hq2, wq2, hk2, wk2, _ = gy.shape
    pq, pk = (kq.shape[2] - 1) // 2, (kk.shape[2] - 1) // 2
    kq = kq.astype(gy.dtype, copy=False)
    kk = kk.astype(gy.dtype, copy=False)
    gx = np.zeros(xshape, dtype=gy.dtype)

    gyq = np.ascontiguousarray(gy).reshape(cout, hq2, wq2, -1)
    gkq = kernels.conv2d_backward_weight(xq.reshape(cin, hq, wq, -1), gyq, kq.shape[2], kq.shape[3], sq, pq)
    gxq = kernels.conv2d_backward_input(gyq, kq, hq, wq, sq, pq)
    gx[:, :, :, ::sk, ::sk, :] += gxq.reshape(cin, hq, wq, hk2, wk2, n)

    gyk = np.ascontiguousarray(gy.transpose(0, 3, 4, 1, 2, 5)).reshape(cout, hk2, wk2, -1)
    gkk = kernels.conv2d_backward_weight(xk.reshape(cin, hk, wk, -1), gyk, kk.shape[2], kk.shape[3], sk, pk)
    gxk = kernels.conv2d_backward_input(gyk, kk, hk, wk, sk, pk)
    gx[:, ::sq, ::sq] += gxk.reshape(cin, hk, wk, hq2, wq2, n).transpose(0, 3, 4, 1, 2, 5)

    gb = gy.sum(axis=(1, 2, 3, 4, 5))
    return gx, gkq, gkk, gb


def _check_strides(*strides):
    for s in strides:
        if s not in (1, 2):
            raise ValueError("strides must be 1 or 2")


def conv4d_center_pivot(x: np.ndarray, k: CenterPivotKernel, stride_q: int = 1, stride_k: int = 1) -> np.ndarray:
    """Center-pivot 4D convolution of a ``Cin x Hq x Wq x Hk x Wk`` tensor.

    Equals a dense 4D convolution whose kernel is zero except on the two 2D
    slices through its center: one spanning the query grid, one the key grid.
    Padding is half the kernel extent on every spatial axis.
    """
    _check_strides(stride_q, stride_k)
    if x.ndim != 5:
        raise ShapeError(f"expected a 5D tensor, got shape {x.shape}")
    y, _ = _cp_forward(x[..., None], k.query_side, k.key_side, k.bias, stride_q, stride_k)
    return y[..., 0]


def conv4d_center_pivot_backward(x, k: CenterPivotKernel, gy, stride_q=1, stride_k=1):
    """Returns ``(grad_x, CenterPivotKernel of parameter gradients)``."""
    _, cache = _cp_forward(x[..., None], k.query_side, k.key_side, k.bias, stride_q, stride_k)
    gx, gq, gk, gb = _cp_backward(gy[..., None], k.query_side, k.key_side, stride_q, stride_k, cache)
    return gx[..., 0], CenterPivotKernel(gq, gk, gb)


def embed_center_pivot(k: CenterPivotKernel) -> np.ndarray:
    """Dense ``Cout x Cin x kh x kw x kh x kw`` kernel equivalent to ``k``."""
    cout, cin, kh, kw = k.query_side.shape
    full = np.zeros((cout, cin, kh, kw, kh, kw), dtype=np.float64)
    full[:, :, :, :, kh // 2, kw // 2] += k.query_side
    full[:, :, kh // 2, kw // 2, :, :] += k.key_side
    return full


def conv4d_naive(x: np.ndarray, full_kernel: np.ndarray, stride_q: int = 1, stride_k: int = 1,
                 bias=None) -> np.ndarray:
    """Dense 4D convolution by direct summation over all kernel offsets (test oracle)."""
    _check_strides(stride_q, stride_k)
    cout, cin, kh, kw, kh2, kw2 = full_kernel.shape
    if x.shape[0] != cin:
        raise ShapeError("channel mismatch")
    _, hq, wq, hk, wk = x.shape
    pads = ((0, 0), (kh // 2,) * 2, (kw // 2,) * 2, (kh2 // 2,) * 2, (kw2 // 2,) * 2)
    xp = np.pad(np.asarray(x, dtype=np.float64), pads)
    oq = ((hq - 1) // stride_q + 1, (wq - 1) // stride_q + 1)
    ok = ((hk - 1) // stride_k + 1, (wk - 1) // stride_k + 1)
    y = np.zeros((cout,) + oq + ok)
    for a in range(kh):
        for b in range(kw):
            for c in range(kh2):
                for d in range(kw2):
                    tap = full_kernel[:, :, a, b, c, d]
                    if not np.any(tap):
                        continue
                    win = xp[:, a:a + stride_q * oq[0]:stride_q, b:b + stride_q * oq[1]:stride_q,
                             c:c + stride_k * ok[0]:stride_k, d:d + stride_k * ok[1]:stride_k]
                    y += np.einsum("oi,ipqrs->opqrs", tap, win)
    if bias is not None:
        y += np.asarray(bias, dtype=np.float64).reshape(-1, 1, 1, 1, 1)
    return y


# ---------------------------------------------------------------------------
# encoder


def _groups(c):
    return math.gcd(MAX_GROUPS, c)


def _to_internal(volumes):
    v = np.asarray(volumes)
    if v.ndim == 5:
        v = v[None]
    if v.ndim != 6:
        raise ShapeError(f"expected N x S^2 x Hq x Wq x Hk x Wk volumes, got {v.shape}")
    return np.ascontiguousarray(np.moveaxis(v, 0, -1))


def check_extents(cfg: EncoderConfig, spatial) -> None:
    ext = list(spatial)
    for name, _, _, stride in cfg.layers():
        if stride == 2:
            if min(ext) < 2:
                raise ShapeError("input too small for encoder depth")
            ext = [(e - 1) // 2 + 1 for e in ext]


def _forward(volumes, w: EncoderWeights, keep: bool):
    cfg = w.config
    p = w.params
    x = _to_internal(volumes)
    if x.shape[0] != cfg.num_scales**2:
        raise ShapeError(f"volume has {x.shape[0]} scale pairs, weights expect {cfg.num_scales ** 2}")
    check_extents(cfg, x.shape[1:5])
    caches = []
    for name, _, cout, stride in cfg.layers():
        z, cp_cache = _cp_forward(x, p[f"{name}.query"], p[f"{name}.key"], p[f"{name}.bias"], stride, stride)
        y, gn_cache = group_norm(z, p[f"{name}.gn.weight"], p[f"{name}.gn.bias"], _groups(cout))
        x = np.maximum(y, 0)
        if keep:
            caches.append((cp_cache, gn_cache, y > 0))
    n = x.shape[-1]
    pooled = x.reshape(x.shape[0], -1, n).mean(axis=1)  # C x N
    h_pre = p["mlp.fc1.weight"] @ pooled + p["mlp.fc1.bias"][:, None]
    h = np.maximum(h_pre, 0)
    logits = (p["mlp.fc2.weight"] @ h + p["mlp.fc2.bias"][:, None]).T  # N x 2
    cache = (caches, x.shape, pooled, h_pre, h) if keep else None
    return logits, cache


def encoder_forward(c, w: EncoderWeights) -> PairLogit:
    """Binary logit for one cross-scale correlation volume."""
    vol = c.volume if isinstance(c, CrossScaleCorrelation) else c
    logits, _ = _forward(vol, w, keep=False)
    return PairLogit(float(logits[0, 0]), float(logits[0, 1]))


def encoder_forward_batch(volumes, w: EncoderWeights) -> np.ndarray:
    """Logits ``N x 2`` for a stack of same-shape volumes."""
    logits, _ = _forward(volumes, w, keep=False)
    return logits


def encoder_forward_train(volumes, w: EncoderWeights):
    """Forward pass retaining what :func:`encoder_backward` needs."""
    return _forward(volumes, w, keep=True)


def encoder_backward(cache, dlogits: np.ndarray, w: EncoderWeights):
    """Returns ``(param_grads, grad_volumes)``; ``grad_volumes`` is ``N x S^2 x ...``."""
    cfg = w.config
    p = w.params
    caches, xshape, pooled, h_pre, h = cache
    dt = pooled.dtype
    g = {}
    dz = np.asarray(dlogits, dtype=dt).T  # 2 x N
    g["mlp.fc2.weight"] = dz @ h.T
    g["mlp.fc2.bias"] = dz.sum(axis=1)
    dh = (p["mlp.fc2.weight"].T @ dz) * (h_pre > 0)
    g["mlp.fc1.weight"] = dh @ pooled.T
    g["mlp.fc1.bias"] = dh.sum(axis=1)
    dpool = p["mlp.fc1.weight"].T @ dh  # C x N
    spatial = int(np.prod(xshape[1:5]))
    dx = np.broadcast_to((dpool / spatial)[:, None, None, None, None, :], xshape).astype(dt)
    for (name, _, _, stride), (cp_cache, gn_cache, mask) in zip(reversed(cfg.layers()), reversed(caches)):
        dy = np.where(mask, dx, 0).astype(dt)
        dzv, g[f"{name}.gn.weight"], g[f"{name}.gn.bias"] = group_norm_backward(dy, p[f"{name}.gn.weight"], gn_cache)
        dx, g[f"{name}.query"], g[f"{name}.key"], g[f"{name}.bias"] = _cp_backward(
            dzv, p[f"{name}.query"], p[f"{name}.key"], stride, stride, cp_cache)
    return g, np.moveaxis(dx, -1, 0)


def similarity_from_logit(z: PairLogit) -> float:
    """Softmax probability of the match class."""
    m = max(z.z0, z.z1)
    e0, e1 = math.exp(z.z0 - m), math.exp(z.z1 - m)
    return e1 / (e0 + e1)


def similarity_from_logits(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e[:, 1] / e.sum(axis=1)


# ---------------------------------------------------------------------------
# weights file


def save_weights(path, w: EncoderWeights) -> None:
    cfg = w.config
    head = [cfg.num_scales, cfg.feature_channels, cfg.reduced_channels, cfg.num_blocks,
            *cfg.block_channels, cfg.convs_per_block, cfg.mlp_hidden]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(f"<{len(head)}I", *head))
        names = sorted(w.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            tensorio.write_tensor(fh, w.params[name])


def load_weights(path) -> EncoderWeights:
    def fail(msg):
        raise tensorio.FormatError(f"{path}: {msg}")

    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            fail("not a CVW1 weights file")
        try:
            s, c_l, c_red, nb = struct.unpack("<4I", fh.read(16))
            widths = struct.unpack(f"<{nb}I", fh.read(4 * nb))
            cpb, hidden = struct.unpack("<2I", fh.read(8))
            cfg = EncoderConfig(s, c_l, c_red, widths, cpb, hidden)
            (count,) = struct.unpack("<I", fh.read(4))
            params = {}
            for _ in range(count):
                (ln,) = struct.unpack("<H", fh.read(2))
                name = fh.read(ln).decode("utf-8")
                params[name] = tensorio.read_tensor(fh)
        except (struct.error, ValueError) as exc:
            fail(f"malformed weights file ({exc})")
    shapes = expected_shapes(cfg)
    if set(shapes) != set(params):
        fail(f"tensor names do not match config (missing {sorted(set(shapes) - set(params))[:3]})")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            fail(f"{name} has shape {params[name].shape}, config implies {shape}")
    return EncoderWeights(cfg, params)
