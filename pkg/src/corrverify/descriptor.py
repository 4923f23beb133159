"""Global descriptor head trained with the margined classification and contrastive losses.

The backbone is frozen, so the head sees fixed feature maps: GeM pooling with
a learnable power, a whitening FC layer and L2 normalization. A momentum copy
of the head produces the descriptors that enter the queue.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import gem_pool, gem_pool_backward, l2_normalize, l2_normalize_backward
from .objectives import (
    LAMBDA_CLS,
    LAMBDA_CON,
    DescriptorBank,
    MarginState,
    classification_loss,
    contrastive_loss,
    global_total_loss,
    queue_update,
)

GEM_P_INIT = 3.0
ETA = 0.999


@dataclass
class GlobalHead:
    weight: np.ndarray  # C_g x C
    bias: np.ndarray  # C_g
    p: float = GEM_P_INIT

    def copy(self) -> "GlobalHead":
        return GlobalHead(self.weight.copy(), self.bias.copy(), self.p)


def init_head(in_channels: int, out_dim: int, rng) -> GlobalHead:
    w = rng.standard_normal((out_dim, in_channels)) / np.sqrt(in_channels)
    return GlobalHead(w, np.zeros(out_dim))


def head_forward(f: np.ndarray, head: GlobalHead):
    """Unit descriptor of one ``C x H x W`` map; returns ``(d, cache)``."""
    f = np.asarray(f, dtype=np.float64)
    g = gem_pool(f, head.p)
    z = head.weight @ g + head.bias
    return l2_normalize(z), (f, g, z)


def head_backward(cache, gd: np.ndarray, head: GlobalHead) -> dict:
    """Gradients wrt ``weight``, ``bias`` and the GeM power ``p``."""
    f, g, z = cache
    gz = l2_normalize_backward(z, gd)
    gg = head.weight.T @ gz
    _, gp = gem_pool_backward(f, head.p, gg)
    return {"weight": np.outer(gz, g), "bias": gz, "p": gp}


def momentum_update(bar: GlobalHead, cur: GlobalHead, eta: float = ETA) -> GlobalHead:
    """``theta_bar <- eta * theta_bar + (1 - eta) * theta``, in place."""
    bar.weight *= eta
    bar.weight += (1.0 - eta) * cur.weight
    bar.bias *= eta
    bar.bias += (1.0 - eta) * cur.bias
    bar.p = eta * bar.p + (1.0 - eta) * cur.p
    return bar


@dataclass
class GlobalTrainer:
    """Head, its momentum copy, class weights plus queue, and one margin state per loss."""

    head: GlobalHead
    head_bar: GlobalHead
    bank: DescriptorBank
    margin_cls: MarginState = field(default_factory=MarginState)
    margin_con: MarginState = field(default_factory=MarginState)
    velocity: dict = field(default_factory=dict)
    lambdas: tuple = (LAMBDA_CLS, LAMBDA_CON)


def make_trainer(in_channels: int, out_dim: int, num_classes: int, queue_size: int, rng,
                 eta: float = ETA) -> GlobalTrainer:
    head = init_head(in_channels, out_dim, rng)
    bank = DescriptorBank(rng.standard_normal((num_classes, out_dim)), queue_size, eta)
    return GlobalTrainer(head, head.copy(), bank)


def global_train_step(tr: GlobalTrainer, feats, labels, lr: float, momentum: float = 0.9) -> float:
    """One batch: enqueue momentum descriptors, then descend on the weighted loss sum."""
    for f, y in zip(feats, labels):
        queue_update(tr.bank, head_forward(f, tr.head_bar)[0], int(y))
    grads = {"weight": 0.0, "bias": 0.0, "p": 0.0, "W": 0.0}
    total, tgt_cos, pos_cos = 0.0, [], []
    n = len(labels)
    for f, y in zip(feats, labels):
        d, cache = head_forward(f, tr.head)
        lc = classification_loss(d, tr.bank, int(y), tr.margin_cls)
        lk = contrastive_loss(d, tr.bank, int(y), tr.margin_con)
        lg = global_total_loss(lc, lk, tr.lambdas)
        total += lg.value / n
        for k, v in head_backward(cache, lg.grads["dq"], tr.head).items():
            grads[k] = grads[k] + v / n
        grads["W"] = grads["W"] + lg.grads["W"] / n
        tgt_cos.append(lc.aux["target_cos"])
        pos_cos.extend(np.atleast_1d(lk.aux["positive_cos"]).tolist())
    params = {"weight": tr.head.weight, "bias": tr.head.bias, "W": tr.bank.class_weights}
    for k, theta in params.items():
        v = momentum * tr.velocity.get(k, 0.0) + grads[k]
        tr.velocity[k] = v
        theta -= lr * v
    vp = momentum * tr.velocity.get("p", 0.0) + grads["p"]
    tr.velocity["p"] = vp
    tr.head.p = max(tr.head.p - lr * vp, 1.0)
    tr.bank.normalize_class_weights()
    tr.margin_cls.commit(tgt_cos)
    tr.margin_con.commit(pos_cos)
    momentum_update(tr.head_bar, tr.head, tr.bank.eta)
    return total
