"""Desk-scale training of the re-ranking encoder.

Curriculum: the hard-negative rate and the Hide-and-Seek drop rate ramp
linearly with the optimizer step. Negatives come either from the top-10
global-descriptor neighbours of the anchor or uniformly from all other
classes. Optimization is SGD with momentum under a cosine learning-rate decay.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .correlation import (
    assemble_cross_scale,
    assemble_cross_scale_backward,
    build_pyramid,
    reduce_scalewise_batch,
    reduce_scalewise_batch_backward,
    transpose_volume,
)
from .encoder4d import (
    EncoderConfig,
    EncoderWeights,
    encoder_backward,
    encoder_forward_batch,
    encoder_forward_train,
    init_weights,
    similarity_from_logits,
)
from .objectives import rerank_batch_loss

log = logging.getLogger(__name__)

HARD_NEGATIVES = 10


@dataclass
class CurriculumSchedule:
    total_steps: int
    r_h_start: float = 0.2
    r_h_end: float = 1.0
    p_has_start: float = 0.0
    p_has_end: float = 0.2

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        for v in (self.r_h_start, self.r_h_end, self.p_has_start, self.p_has_end):
            if not 0.0 <= v <= 1.0:
                raise ValueError("curriculum endpoints must lie in [0, 1]")


@dataclass
class TrainConfig:
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    steps: int = 2000

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def schedule_at(sch: CurriculumSchedule, step: int):
    """``(r_h, p_has)`` at ``step``, linear between the endpoints."""
    if step < 0 or step > sch.total_steps:
        log.warning("schedule step %d outside [0, %d]; clamping", step, sch.total_steps)
        step = min(max(step, 0), sch.total_steps)
    if step == sch.total_steps:
        return sch.r_h_end, sch.p_has_end
    a = step / sch.total_steps
    return (sch.r_h_start + a * (sch.r_h_end - sch.r_h_start),
            sch.p_has_start + a * (sch.p_has_end - sch.p_has_start))


def cosine_lr(lr: float, step: int, steps: int) -> float:
    return lr * 0.5 * (1.0 + math.cos(math.pi * step / steps))


# ---------------------------------------------------------------------------
# hard negatives and sampling


def mine_hard_negatives(descriptors, k: int = HARD_NEGATIVES) -> dict:
    """Top-``k`` different-label neighbours of every sample by descriptor cosine.

    ``descriptors`` is a sequence of ``(id, label, d_g)``. Ties break by
    ascending id. Returns ``{id: [negative ids]}``.
    """
    ids = [d[0] for d in descriptors]
    labels = np.asarray([d[1] for d in descriptors])
    mat = np.stack([np.asarray(d[2], dtype=np.float64) for d in descriptors])
    if len(set(labels.tolist())) < 2:
        raise ValueError("hard-negative mining needs at least two labels")
    sims = mat @ mat.T
    id_rank = np.argsort(np.argsort(np.asarray(ids, dtype=object)))
    out = {}
    for i, sid in enumerate(ids):
        neg = np.flatnonzero(labels != labels[i])
        if len(neg) == 0:
            raise ValueError(f"sample {sid!r} has no negatives")
        order = np.lexsort((id_rank[neg], -sims[i, neg]))
        out[sid] = [ids[j] for j in neg[order[:k]]]
    return out


def hide_and_seek(f: np.ndarray, p_has: float, rng) -> np.ndarray:
    """Zero each spatial position (all channels) independently with probability ``p_has``."""
    if not 0.0 <= p_has <= 1.0:
        raise ValueError("p_has must lie in [0, 1]")
    keep = rng.random(f.shape[1:]) >= p_has
    return f * keep[None].astype(f.dtype)


class TripletSampler:
    """Draws ``(anchor, positive, negative)`` index triplets from a labelled set."""

    def __init__(self, labels, ids, hard_index: dict):
        self.labels = np.asarray(labels)
        self.ids = list(ids)
        pos = {sid: i for i, sid in enumerate(self.ids)}
        self.by_label = {}
        for i, lab in enumerate(self.labels.tolist()):
            self.by_label.setdefault(lab, []).append(i)
        if all(len(v) < 2 for v in self.by_label.values()):
            raise ValueError("every label is a singleton; no positives to sample")
        self.hard = {pos[k]: np.asarray([pos[j] for j in v]) for k, v in hard_index.items()}
        self.negatives = {lab: np.flatnonzero(self.labels != lab) for lab in self.by_label}

    def sample(self, r_h: float, rng):
        n = len(self.labels)
        while True:
            q = int(rng.integers(n))
            same = self.by_label[int(self.labels[q])]
            if len(same) >= 2:
                break
        p = q
        while p == q:
            p = same[int(rng.integers(len(same)))]
        if rng.random() < r_h:
            pool = self.hard[q]
        else:
            pool = self.negatives[int(self.labels[q])]
        neg = int(pool[int(rng.integers(len(pool)))])
        return q, p, neg


def sample_triplet(dataset, hni: dict, r_h: float, rng):
    """One ``(q, p, n)`` index triplet; see :class:`TripletSampler`."""
    return TripletSampler(dataset.labels, dataset.ids, hni).sample(r_h, rng)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SGDState:
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, state: SGDState, lr_t: float) -> dict:
    """``v <- mu v + g; theta <- theta - lr v`` in place; returns ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"divergence: non-finite gradient for {name}")
    for name, g in grads.items():
        theta = params[name]
        if theta.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {theta.shape}")
        v = state.velocity.get(name)
        v = g.astype(theta.dtype) if v is None else state.momentum * v + g.astype(theta.dtype)
        state.velocity[name] = v
        theta -= (lr_t * v).astype(theta.dtype)
    return params


# ---------------------------------------------------------------------------
# pair scoring and the loss over a batch of triplets


def triplet_loss_and_grads(feats, triplets, w: EncoderWeights, p_has: float = 0.0, rng=None):
    """Symmetric re-ranking loss over a batch of triplets and its parameter gradients.

    ``feats`` is indexable by sample index; ``triplets`` holds index triples.
    Each sample's map is masked (Hide-and-Seek) once per triplet slot.
    """
    raw = []
    for trip in triplets:
        for i in trip:
            f = feats[i]
            if p_has > 0:
                f = hide_and_seek(f, p_has, rng)
            raw.append(build_pyramid(f, w.config.num_scales))
    pyrs, red_cache = reduce_scalewise_batch(raw, w.reducer, keep=True)
    vols = []
    for t in range(len(triplets)):
        pq, pp, pn = pyrs[3 * t:3 * t + 3]
        v_qp = assemble_cross_scale(pq, pp).volume
        v_qn = assemble_cross_scale(pq, pn).volume
        vols += [v_qp, transpose_volume(v_qp), v_qn, transpose_volume(v_qn)]
    batch = np.stack(vols)
    logits, cache = encoder_forward_train(batch, w)
    labels = np.tile([1, 1, 0, 0], len(triplets))
    loss, dlogits = rerank_batch_loss(logits, labels)
    grads, dvol = encoder_backward(cache, dlogits, w)

    level_grads = []
    for t in range(len(triplets)):
        pq, pp, pn = pyrs[3 * t:3 * t + 3]
        g_qp = dvol[4 * t] + transpose_volume(dvol[4 * t + 1])
        g_qn = dvol[4 * t + 2] + transpose_volume(dvol[4 * t + 3])
        gq1, gp = assemble_cross_scale_backward(pq, pp, g_qp)
        gq2, gn = assemble_cross_scale_backward(pq, pn, g_qn)
        level_grads += [[a + b for a, b in zip(gq1, gq2)], gp, gn]
    rg = reduce_scalewise_batch_backward(level_grads, w.reducer, red_cache)
    for i in range(w.config.num_scales):
        grads[f"reducer.{i}.weight"] = rg.kernels[i]
        grads[f"reducer.{i}.bias"] = rg.biases[i]
    return loss, grads, logits


def score_pairs(feats, pairs, w: EncoderWeights, chunk: int = 32) -> np.ndarray:
    """Verification similarity ``s_r`` for index pairs ``(q, k)``."""
    used = sorted({i for pair in pairs for i in pair})
    reduced = reduce_scalewise_batch([build_pyramid(feats[i], w.config.num_scales) for i in used], w.reducer)
    pyr = dict(zip(used, reduced))
    out = []
    for start in range(0, len(pairs), chunk):
        vols = [assemble_cross_scale(pyr[q], pyr[k]).volume for q, k in pairs[start:start + chunk]]
        out.append(similarity_from_logits(encoder_forward_batch(np.stack(vols), w)))
    return np.concatenate(out) if out else np.zeros(0)


def toy_pairs(dataset, rng, hard_index: dict = None):
    """One positive and one negative pair per sample, with labels ``1``/``0``.

    Negatives are uniform over other labels, or drawn from ``hard_index``
    (mined top-10 lists) when given.
    """
    pos = {sid: i for i, sid in enumerate(dataset.ids)}
    pairs, labels = [], []
    for i in range(len(dataset)):
        same = np.flatnonzero((dataset.labels == dataset.labels[i]) & (np.arange(len(dataset)) != i))
        if hard_index is None:
            pool = np.flatnonzero(dataset.labels != dataset.labels[i])
        else:
            pool = np.asarray([pos[j] for j in hard_index[dataset.ids[i]]])
        pairs += [(i, int(same[rng.integers(len(same))])), (i, int(pool[rng.integers(len(pool))]))]
        labels += [1, 0]
    return pairs, np.asarray(labels)


def pair_accuracy(feats, pairs, is_match, w: EncoderWeights) -> float:
    s = score_pairs(feats, pairs, w)
    return float(np.mean((s > 0.5) == np.asarray(is_match, dtype=bool)))


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainResult:
    weights: EncoderWeights
    curve: list  # (step, loss, lr, r_h, p_has)
    seconds: float = 0.0


def train_rerank_toy(dataset, cfg: TrainConfig, sch: CurriculumSchedule, enc_cfg: EncoderConfig,
                     fixed_r_h: float = None, fixed_p_has: float = None, progress=None) -> TrainResult:
    """Train reducer, 4D encoder and classifier on a labelled feature-map set.

    ``fixed_r_h`` / ``fixed_p_has`` override the curriculum (ablations).
    Bit-reproducible for a given ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    w = init_weights(enc_cfg, rng)
    hni = mine_hard_negatives(list(zip(dataset.ids, dataset.labels.tolist(), dataset.descriptors)))
    sampler = TripletSampler(dataset.labels, dataset.ids, hni)
    state = SGDState(momentum=cfg.momentum)
    curve = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        r_h, p_has = schedule_at(sch, min(step, sch.total_steps))
        if fixed_r_h is not None:
            r_h = fixed_r_h
        if fixed_p_has is not None:
            p_has = fixed_p_has
        lr_t = cosine_lr(cfg.lr, step, cfg.steps)
        triplets = [sampler.sample(r_h, rng) for _ in range(cfg.batch_size)]
        loss, grads, _ = triplet_loss_and_grads(dataset.features, triplets, w, p_has, rng)
        if not math.isfinite(loss):
            raise FloatingPointError(f"NaN loss at step {step} (lr={lr_t:.6g}, r_h={r_h:.3f}, p_has={p_has:.3f})")
        sgd_step(w.params, grads, state, lr_t)
        curve.append((step, loss, lr_t, r_h, p_has))
        if progress is not None:
            progress(step, loss)
    return TrainResult(w, curve, time.perf_counter() - t0)


def toy_encoder_config(channels: int = 32) -> EncoderConfig:
    """Encoder sized for 8 x 8 toy maps: three blocks, so the deepest grid is 2 x 2 x 2 x 2."""
    return EncoderConfig(num_scales=3, feature_channels=channels, reduced_channels=channels,
                         block_channels=(8, 16, 32), convs_per_block=1, mlp_hidden=32)


def config_fields():
    """Recognised ``key = value`` config keys and their owning dataclass."""
    out = {}
    for cls in (TrainConfig, CurriculumSchedule, EncoderConfig):
        for f in fields(cls):
            out[f.name] = cls
    return out
