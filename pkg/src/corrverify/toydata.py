"""Synthetic planted-pattern feature maps.

Classes are grouped into families. Every class in a family plants the same
set of part vectors, but in its own spatial arrangement, so pooled (global)
descriptors cannot tell family members apart while a geometric matcher can.
Instances vary the pattern position, its scale, the clutter and the noise.
Clutter cells carry random sparse part-like vectors, so background positions
look like plausible local features rather than a dense common direction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import gem_pool, l2_normalize, resize_bilinear


@dataclass
class ToyConfig:
    channels: int = 32
    size: int = 8
    families: int = 2
    layouts_per_family: int = 2
    grid: int = 3
    active_channels: int = 4
    max_scale: float = 1.5
    clutter: float = 0.2
    noise: float = 0.02
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return self.families * self.layouts_per_family


@dataclass
class ToyDataset:
    features: np.ndarray  # N x C x H x W, float32
    labels: np.ndarray  # N
    families: np.ndarray  # N
    ids: list = field(default_factory=list)
    descriptors: np.ndarray = None  # N x C, unit rows

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ToyDataset":
        idx = np.asarray(idx)
        return ToyDataset(self.features[idx], self.labels[idx], self.families[idx],
                          [self.ids[i] for i in idx], self.descriptors[idx])


class PatternBank:
    """Part vectors and per-class layouts, fixed by ``cfg.seed``."""

    def __init__(self, cfg: ToyConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        g2 = cfg.grid * cfg.grid
        self.parts = np.zeros((cfg.families, g2, cfg.channels))
        for f in range(cfg.families):
            for j in range(g2):
                ch = rng.choice(cfg.channels, size=cfg.active_channels, replace=False)
                self.parts[f, j, ch] = rng.uniform(0.5, 1.5, size=cfg.active_channels)
        self.layouts = np.zeros((cfg.num_classes, g2), dtype=np.int64)
        for f in range(cfg.families):
            perms = [np.arange(g2)]
            while len(perms) < cfg.layouts_per_family:
                cand = rng.permutation(g2)
                # every cell moves, so no two layouts share a placement
                if all(np.all(cand != p) for p in perms):
                    perms.append(cand)
            for j, perm in enumerate(perms):
                self.layouts[f * cfg.layouts_per_family + j] = perm

    def family_of(self, label: int) -> int:
        return label // self.cfg.layouts_per_family

    def pattern(self, label: int) -> np.ndarray:
        """``C x grid x grid`` pattern of class ``label``."""
        g = self.cfg.grid
        fam = self.family_of(label)
        cells = self.parts[fam][self.layouts[label]]  # g2 x C
        return cells.T.reshape(self.cfg.channels, g, g)

    def render(self, label: int, rng) -> np.ndarray:
        cfg = self.cfg
        c, h = cfg.channels, cfg.size
        out = np.zeros((c, h, h))
        occupied = rng.random((h, h)) < cfg.clutter
        for y, x in zip(*np.nonzero(occupied)):
            ch = rng.choice(c, size=cfg.active_channels, replace=False)
            out[ch, y, x] = rng.uniform(0.5, 1.5, size=cfg.active_channels)
        scale = rng.uniform(1.0, cfg.max_scale)
        n = min(max(int(np.floor(cfg.grid * scale + 0.5)), 1), h)
        patch = resize_bilinear(self.pattern(label), n, n)
        y0, x0 = rng.integers(0, h - n + 1, size=2)
        out[:, y0:y0 + n, x0:x0 + n] = patch
        out += rng.standard_normal(out.shape) * cfg.noise
        return np.maximum(out, 0).astype(np.float32)


def global_descriptor(f: np.ndarray, p: float = 3.0) -> np.ndarray:
    """GeM pooling followed by L2 normalization (identity whitening)."""
    return l2_normalize(gem_pool(f.astype(np.float64), p)).astype(np.float32)


def make_dataset(cfg: ToyConfig, per_class: int, seed: int, id_prefix: str = "img") -> ToyDataset:
    bank = PatternBank(cfg)
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for label in range(cfg.num_classes):
        for _ in range(per_class):
            feats.append(bank.render(label, rng))
            labels.append(label)
    feats = np.stack(feats)
    labels = np.asarray(labels)
    order = rng.permutation(len(labels))
    feats, labels = feats[order], labels[order]
    ids = [f"{id_prefix}{i:05d}" for i in range(len(labels))]
    desc = np.stack([global_descriptor(f) for f in feats])
    return ToyDataset(feats, labels, labels // cfg.layouts_per_family, ids, desc)
