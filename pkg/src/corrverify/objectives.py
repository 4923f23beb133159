"""Losses for the global descriptor head and the re-ranking encoder.

Classification and momentum-contrastive losses use CurricularFace-modulated
cosine logits; the re-ranking loss is a symmetric pair cross-entropy. Every
loss returns its value together with analytic gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder4d import PairLogit

TAU = 1.0 / 30.0
MARGIN = 0.15
T_MOMENTUM = 0.99
LAMBDA_CLS = 0.5
LAMBDA_CON = 0.5


@dataclass
class MarginState:
    """CurricularFace state: margin, temperature and the running positive-cosine mean ``t``."""

    t: float = 0.0
    momentum: float = T_MOMENTUM
    m: float = MARGIN
    scale_inv_tau: float = 1.0 / TAU

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("margin must be >= 0")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError("t must lie in [0, 1]")

    def commit(self, target_cosines) -> None:
        """Fold a batch of target cosines into ``t`` (called once per batch)."""
        mean = float(np.mean(target_cosines))
        t = self.momentum * self.t + (1.0 - self.momentum) * mean
        self.t = min(max(t, 0.0), 1.0)


@dataclass
class LossValue:
    value: float
    grads: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# CurricularFace modulation


def _target_margin(cos, m):
    """cos(theta + m) with the usual fallback once theta + m passes pi; also its derivative."""
    cos = np.clip(cos, -1.0, 1.0)
    sin = np.sqrt(np.maximum(1.0 - cos * cos, 0.0))
    th = math.cos(math.pi - m)
    val = np.where(cos > th, cos * math.cos(m) - sin * math.sin(m), cos - math.sin(math.pi - m) * m)
    safe_sin = np.maximum(sin, 1e-12)
    dval = np.where(cos > th, math.cos(m) + math.sin(m) * cos / safe_sin, 1.0)
    return val, dval


def curricular_margin(cos_theta: float, is_target: bool, st: MarginState, target_margined: float = None) -> float:
    """Modulated logit before temperature scaling.

    Target logits become ``cos(theta + m)``. A non-target logit whose cosine
    exceeds the margined target (``target_margined``) is a hard example and is
    re-weighted to ``cos * (t + cos)``; easy ones pass through unchanged.
    """
    if is_target:
        return float(_target_margin(np.float64(cos_theta), st.m)[0])
    if target_margined is None:
        raise ValueError("negative branch needs the margined target logit")
    if cos_theta > target_margined:
        return cos_theta * (st.t + cos_theta)
    return cos_theta


def _negative_modulation(cos, target_margined, t):
    hard = cos > target_margined
    val = np.where(hard, cos * (t + cos), cos)
    dval = np.where(hard, t + 2.0 * cos, 1.0)
    return val, dval


def _softmax(z):
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def _check_unit(d, name="descriptor"):
    n = float(np.linalg.norm(d))
    if abs(n - 1.0) > 1e-3:
        raise ValueError(f"{name} must be unit-norm (norm {n:.6f})")


# ---------------------------------------------------------------------------
# descriptor bank


class DescriptorBank:
    """Class weights ``W`` plus a FIFO queue of momentum descriptors with labels."""

    def __init__(self, class_weights: np.ndarray, queue_size: int, eta: float = 0.999):
        if queue_size < 1:
            raise ValueError("queue size must be >= 1")
        w = np.asarray(class_weights, dtype=np.float64)
        self.class_weights = w / np.linalg.norm(w, axis=1, keepdims=True)
        self.queue_size = int(queue_size)
        self.eta = eta
        dim = w.shape[1]
        self._desc = np.zeros((queue_size, dim))
        self._labels = np.full(queue_size, -1, dtype=np.int64)
        self._head = 0  # next write slot
        self._count = 0

    @property
    def dim(self) -> int:
        return self.class_weights.shape[1]

    def __len__(self):
        return self._count

    def _order(self):
        if self._count < self.queue_size:
            return np.arange(self._count)
        return (self._head + np.arange(self.queue_size)) % self.queue_size

    def entries(self):
        """Queue contents ``(descriptors, labels)`` from oldest to newest."""
        idx = self._order()
        return self._desc[idx], self._labels[idx]

    def normalize_class_weights(self) -> None:
        self.class_weights /= np.linalg.norm(self.class_weights, axis=1, keepdims=True)


def queue_update(bank: DescriptorBank, d_momentum: np.ndarray, label: int) -> DescriptorBank:
    """Enqueue the newest momentum descriptor, dropping the oldest once full."""
    _check_unit(d_momentum, "momentum descriptor")
    bank._desc[bank._head] = d_momentum
    bank._labels[bank._head] = label
    bank._head = (bank._head + 1) % bank.queue_size
    bank._count = min(bank._count + 1, bank.queue_size)
    return bank


# ---------------------------------------------------------------------------
# global head losses


def classification_loss(dq: np.ndarray, bank: DescriptorBank, target: int, st: MarginState) -> LossValue:
    """Margined softmax cross-entropy over cosine logits against the class weights.

    Gradients: ``"dq"`` (descriptor) and ``"W"`` (class weights, dense).
    """
    _check_unit(dq)
    w = bank.class_weights
    if not 0 <= target < w.shape[0]:
        raise IndexError(f"class {target} out of range")
    dq = np.asarray(dq, dtype=np.float64)
    cos = w @ dq
    tgt_val, tgt_d = _target_margin(cos[target], st.m)
    mod, dmod = _negative_modulation(cos, tgt_val, st.t)
    mod[target], dmod[target] = tgt_val, tgt_d
    logits = mod * st.scale_inv_tau
    p = _softmax(logits)
    loss = -math.log(max(p[target], 1e-300))
    dlog = p.copy()
    dlog[target] -= 1.0
    dcos = dlog * st.scale_inv_tau * dmod
    return LossValue(loss, {"dq": w.T @ dcos, "W": np.outer(dcos, dq)},
                     {"target_cos": float(cos[target])})


def contrastive_loss(dq: np.ndarray, bank: DescriptorBank, query_label: int, st: MarginState) -> LossValue:
    """Margined momentum-contrastive loss against the queue.

    Each in-queue positive ``p`` contributes a cross-entropy whose denominator
    covers ``p`` and the in-queue negatives; the loss averages these terms.
    Queue entries are constants, so only ``"dq"`` is returned.
    """
    _check_unit(dq)
    dq = np.asarray(dq, dtype=np.float64)
    desc, labels = bank.entries()
    pos = labels == query_label
    if not np.any(pos):
        raise ValueError("positive missing from queue")
    cos = desc @ dq
    neg_cos = cos[~pos]
    neg_desc = desc[~pos]
    total = 0.0
    grad = np.zeros_like(dq)
    pos_idx = np.flatnonzero(pos)
    for i in pos_idx:
        tv, td = _target_margin(cos[i], st.m)
        nv, nd = _negative_modulation(neg_cos, tv, st.t)
        logits = np.concatenate(([tv], nv)) * st.scale_inv_tau
        p = _softmax(logits)
        total += -math.log(max(p[0], 1e-300))
        g = p.copy()
        g[0] -= 1.0
        g *= st.scale_inv_tau
        grad += g[0] * td * desc[i] + neg_desc.T @ (g[1:] * nd)
    k = len(pos_idx)
    return LossValue(total / k, {"dq": grad / k}, {"positive_cos": cos[pos_idx]})


def global_total_loss(lc: LossValue, lk: LossValue, lambdas=(LAMBDA_CLS, LAMBDA_CON)) -> LossValue:
    """Weighted sum of the classification and contrastive losses, gradients merged alike."""
    a, b = lambdas
    grads = {}
    for name in set(lc.grads) | set(lk.grads):
        ga, gb = lc.grads.get(name), lk.grads.get(name)
        if ga is None:
            grads[name] = b * gb
        elif gb is None:
            grads[name] = a * ga
        else:
            grads[name] = a * ga + b * gb
    return LossValue(a * lc.value + b * lk.value, grads)


# ---------------------------------------------------------------------------
# re-ranking losses


def _as_array(z):
    if isinstance(z, PairLogit):
        return np.array([z.z0, z.z1], dtype=np.float64)
    return np.asarray(z, dtype=np.float64)


def rerank_pair_loss(z, is_match: bool) -> LossValue:
    """Cross-entropy of ``softmax(z)`` against the match indicator; gradient ``"z"``."""
    z = _as_array(z)
    m = z.max()
    lse = m + math.log(math.exp(z[0] - m) + math.exp(z[1] - m))
    y = 1 if is_match else 0
    p = np.exp(z - lse)
    g = p.copy()
    g[y] -= 1.0
    return LossValue(float(lse - z[y]), {"z": g})


def rerank_total_loss(z_qp, z_pq, z_qn, z_nq) -> LossValue:
    """Mean of the four directional pair losses (two positive, two negative)."""
    parts = [
        rerank_pair_loss(z_qp, True),
        rerank_pair_loss(z_pq, True),
        rerank_pair_loss(z_qn, False),
        rerank_pair_loss(z_nq, False),
    ]
    names = ("z_qp", "z_pq", "z_qn", "z_nq")
    return LossValue(sum(p.value for p in parts) / 4.0,
                     {n: p.grads["z"] / 4.0 for n, p in zip(names, parts)})


def rerank_batch_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean pair cross-entropy over rows of ``logits`` (``N x 2``); returns ``(loss, dlogits)``."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    idx = np.arange(len(z))
    loss = lse - z[idx, labels]
    p = np.exp(z - lse[:, None])
    p[idx, labels] -= 1.0
    n = len(z)
    return float(loss.mean()), p / n
