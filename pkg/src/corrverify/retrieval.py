"""Retrieval pipeline: feature store, global ranking, verification re-ranking, mAP."""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .correlation import FeaturePyramid, assemble_cross_scale, build_pyramid, reduce_scalewise
from .encoder4d import EncoderWeights, encoder_forward_batch, similarity_from_logits
from .numerics import l2_normalize

ALPHA = 0.5
STORE_FORMAT = "cvstore1"


# ---------------------------------------------------------------------------
# 8-bit affine quantization


@dataclass
class QuantizedFeatureMap:
    codes: np.ndarray  # uint8, C x H x W
    scale: float
    zero_point: float

    @property
    def shape(self):
        return self.codes.shape

    @property
    def nbytes(self) -> int:
        return self.codes.nbytes


def quantize(x: np.ndarray) -> QuantizedFeatureMap:
    """Per-tensor affine uint8 quantization over ``[min, max]``."""
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    lo, hi = np.float32(x.min()), np.float32(x.max())
    if hi == lo:
        return QuantizedFeatureMap(np.zeros(x.shape, dtype=np.uint8), 1.0, float(lo))
    scale = np.float32((hi - lo) / np.float32(255.0))
    codes = np.clip(np.rint((x - lo) / scale), 0, 255).astype(np.uint8)
    return QuantizedFeatureMap(codes, float(scale), float(lo))


def dequantize(q: QuantizedFeatureMap) -> np.ndarray:
    return q.codes.astype(np.float32) * np.float32(q.scale) + np.float32(q.zero_point)


# ---------------------------------------------------------------------------
# ranked lists


@dataclass
class RankedEntry:
    id: str
    s_g: float
    s_r: float = None
    s_fused: float = None


@dataclass
class RankedList:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self):
        return [e.id for e in self.entries]


# ---------------------------------------------------------------------------
# feature store


class FeatureStore:
    """Global descriptors (float32) and reduced pyramids (uint8 or float32) by id."""

    def __init__(self, num_scales: int, quantized: bool = True):
        self.num_scales = num_scales
        self.quantized = quantized
        self.ids = []
        self._index = {}
        self._desc = []
        self.levels = {}
        self._matrix = None

    def __len__(self):
        return len(self.ids)

    def __contains__(self, sid):
        return sid in self._index

    @property
    def descriptor_dim(self):
        return self._desc[0].shape[0] if self._desc else 0

    @property
    def channels(self):
        if not self.ids:
            return 0
        return self.levels[self.ids[0]][0].shape[0]

    @property
    def descriptors(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.stack(self._desc) if self._desc else np.zeros((0, 0), np.float32)
        return self._matrix

    def descriptor(self, sid) -> np.ndarray:
        return self._desc[self._index[sid]]

    def add(self, sid, descriptor: np.ndarray, reduced: FeaturePyramid) -> None:
        """Insert an entry; the descriptor is L2-normalized, levels quantized if enabled."""
        if sid in self._index:
            raise ValueError(f"duplicate id {sid!r}")
        if len(reduced) != self.num_scales:
            raise ValueError(f"{sid}: pyramid has {len(reduced)} levels, store expects {self.num_scales}")
        d, degenerate = l2_normalize(np.asarray(descriptor, dtype=np.float32), with_flag=True)
        if degenerate:
            raise ValueError(f"{sid}: zero global descriptor")
        if self._desc and d.shape != self._desc[0].shape:
            raise ValueError(f"{sid}: descriptor dim {d.shape[0]} differs from store dim {self.descriptor_dim}")
        levels = [quantize(f) if self.quantized else np.asarray(f, dtype=np.float32) for f in reduced.levels]
        self._add_raw(sid, d, levels)

    def _add_raw(self, sid, d, levels):
        self._index[sid] = len(self.ids)
        self.ids.append(sid)
        self._desc.append(d)
        self.levels[sid] = levels
        self._matrix = None

    def pyramid(self, sid) -> FeaturePyramid:
        if sid not in self.levels:
            raise KeyError(f"no pyramid stored for id {sid!r}")
        levels = [dequantize(f) if isinstance(f, QuantizedFeatureMap) else f for f in self.levels[sid]]
        return FeaturePyramid(levels, [2 ** (-0.5 * s) for s in range(len(levels))])

    def payload_bytes(self) -> int:
        """Bytes of stored pyramid payload (codes or float32 values, no headers)."""
        return sum(f.nbytes for lv in self.levels.values() for f in lv)


def add_feature_map(store: FeatureStore, sid, descriptor, feature_map, w: EncoderWeights) -> None:
    """Build, reduce and store the pyramid of one raw feature map."""
    reduced = reduce_scalewise(build_pyramid(np.asarray(feature_map, dtype=np.float32), store.num_scales), w.reducer)
    store.add(sid, descriptor, reduced)


# ---------------------------------------------------------------------------
# ranking


def global_rank(query, store: FeatureStore, top: int = None, exclude=()) -> RankedList:
    """All database ids by descending descriptor cosine; ties by ascending id.

    ``query`` is an id in ``store`` or a descriptor vector.
    """
    if len(store) == 0:
        raise ValueError("empty store")
    q = store.descriptor(query) if isinstance(query, str) else np.asarray(query, dtype=np.float32)
    mat = store.descriptors
    if q.shape != (mat.shape[1],):
        raise ValueError(f"query dim {q.shape} does not match store dim {mat.shape[1]}")
    q = l2_normalize(q)
    scores = mat.astype(np.float64) @ q.astype(np.float64)
    ids = np.asarray(store.ids, dtype=object)
    order = np.lexsort((np.argsort(np.argsort(ids)), -scores))
    out = []
    for i in order:
        if store.ids[i] in exclude:
            continue
        s = float(scores[i])
        out.append(RankedEntry(store.ids[i], s, None, s))
        if top is not None and len(out) >= top:
            break
    return RankedList(out)


def rerank_topk(query_id, rl: RankedList, k: int, w: EncoderWeights, alpha: float, store: FeatureStore,
                query_pyramid: FeaturePyramid = None, chunk: int = 32) -> RankedList:
    """Re-score the first ``k`` candidates with ``s_g + alpha * s_r`` and re-sort them.

    Entries beyond ``k`` keep their global order behind the re-ranked prefix.
    """
    if k > len(rl):
        raise ValueError(f"k={k} exceeds list length {len(rl)}")
    pq = query_pyramid if query_pyramid is not None else store.pyramid(query_id)
    head = rl.entries[:k]
    for e in head:
        if e.id not in store.levels:
            raise KeyError(f"missing pyramid for candidate {e.id!r}")
    s_r = np.zeros(len(head))
    # candidates are scored independently; only the final sort sees all of them
    for start in range(0, len(head), chunk):
        part = head[start:start + chunk]
        vols = [assemble_cross_scale(pq, store.pyramid(e.id)).volume for e in part]
        shapes = {v.shape for v in vols}
        if len(shapes) == 1:
            s_r[start:start + len(part)] = similarity_from_logits(encoder_forward_batch(np.stack(vols), w))
        else:
            for j, v in enumerate(vols):
                s_r[start + j] = similarity_from_logits(encoder_forward_batch(v[None], w))[0]
    rescored = [RankedEntry(e.id, e.s_g, float(r), e.s_g + alpha * float(r)) for e, r in zip(head, s_r)]
    order = sorted(range(len(rescored)), key=lambda i: (-rescored[i].s_fused, i))
    tail = [RankedEntry(e.id, e.s_g, None, e.s_g) for e in rl.entries[k:]]
    return RankedList([rescored[i] for i in order] + tail)


# ---------------------------------------------------------------------------
# evaluation


def average_precision(ranked_ids, relevant, cutoff: int = None) -> float:
    if not relevant:
        raise ValueError("empty relevance set")
    limit = len(ranked_ids) if cutoff is None else min(cutoff, len(ranked_ids))
    hits = 0
    total = 0.0
    for r, sid in enumerate(ranked_ids[:limit], start=1):
        if sid in relevant:
            hits += 1
            total += hits / r
    norm = len(relevant) if cutoff is None else min(len(relevant), cutoff)
    return total / norm


def eval_map(rankings: dict, relevance: dict, cutoff: int = None) -> float:
    """Mean over queries of average precision (optionally truncated at ``cutoff``)."""
    if not rankings:
        raise ValueError("no rankings to evaluate")
    aps = []
    for qid, rl in rankings.items():
        rel = relevance.get(qid)
        if not rel:
            raise ValueError(f"query {qid!r} has an empty relevance set")
        ids = rl.ids if isinstance(rl, RankedList) else list(rl)
        aps.append(average_precision(ids, set(rel), cutoff))
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# persistence


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def write_ranks(fh, rankings: dict) -> None:
    """CSV ``query_id,rank,id,s_g,s_r,s_fused``; queries in the given order."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["query_id", "rank", "id", "s_g", "s_r", "s_fused"])
    for qid, rl in rankings.items():
        for r, e in enumerate(rl.entries, start=1):
            w.writerow([qid, r, e.id, _fmt(e.s_g), _fmt(e.s_r), _fmt(e.s_fused)])


def read_ranks(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            qid = row.get("query_id", "")
            out.setdefault(qid, []).append((int(row["rank"]), row["id"]))
    return {q: [sid for _, sid in sorted(v)] for q, v in out.items()}


def read_truth(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for row in reader:
            if not row or row[0].startswith("#") or row[0] == "query_id":
                continue
            out.setdefault(row[0].strip(), set()).add(row[1].strip())
    return out


def _write_kv(fh, items):
    for k, v in items:
        fh.write(f"{k} = {v}\n")


def export(store: FeatureStore, path) -> None:
    """Persist ``store`` as a directory (manifest, ids, descriptors, per-entry pyramids)."""
    path = Path(path)
    (path / "levels").mkdir(parents=True, exist_ok=True)
    with open(path / "manifest.txt", "w") as fh:
        _write_kv(fh, [("format", STORE_FORMAT), ("count", len(store)),
                       ("descriptor_dim", store.descriptor_dim), ("num_scales", store.num_scales),
                       ("channels", store.channels), ("quantized", int(store.quantized))])
    with open(path / "ids.txt", "w") as fh:
        fh.writelines(f"{sid}\n" for sid in store.ids)
    tensorio.save_tensor(path / "descriptors.cvt", store.descriptors)
    for i, sid in enumerate(store.ids):
        with open(path / "levels" / f"{i:06d}.cvt", "wb") as fh:
            for f in store.levels[sid]:
                if isinstance(f, QuantizedFeatureMap):
                    tensorio.write_quantized(fh, f.codes, f.scale, f.zero_point)
                else:
                    tensorio.write_tensor(fh, f)


def read_kv(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def load_store(path) -> FeatureStore:
    path = Path(path)
    meta = read_kv(path / "manifest.txt")
    if meta.get("format") != STORE_FORMAT:
        raise tensorio.FormatError(f"{path / 'manifest.txt'}: not a {STORE_FORMAT} store")
    count, s = int(meta["count"]), int(meta["num_scales"])
    with open(path / "ids.txt") as fh:
        ids = [line.rstrip("\n") for line in fh if line.strip()]
    if len(ids) != count:
        raise tensorio.FormatError(f"{path / 'ids.txt'}: {len(ids)} ids, manifest says {count}")
    desc = tensorio.load_tensor(path / "descriptors.cvt")
    if desc.shape != (count, int(meta["descriptor_dim"])):
        raise tensorio.FormatError(f"{path / 'descriptors.cvt'}: shape {desc.shape} disagrees with manifest")
    store = FeatureStore(s, quantized=bool(int(meta["quantized"])))
    for i, sid in enumerate(ids):
        fname = path / "levels" / f"{i:06d}.cvt"
        levels = []
        with open(fname, "rb") as fh:
            for _ in range(s):
                rec = tensorio.read_record(fh)
                if rec is None:
                    raise tensorio.FormatError(f"{fname}: expected {s} levels")
                kind, payload = rec
                levels.append(QuantizedFeatureMap(*payload) if kind == "u8q" else payload)
        if levels[0].shape[0] != int(meta["channels"]):
            raise tensorio.FormatError(f"{fname}: channel count drifts from manifest")
        store._add_raw(sid, desc[i].copy(), levels)
    return store


def read_manifest(path):
    """Ingest manifest: ``key = value`` header lines, then ``id descriptor_path feature_path`` rows."""
    path = Path(path)
    header, rows = {}, []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" in line:
                k, v = line.split("=", 1)
                header[k.strip()] = v.strip()
                continue
            parts = line.split()
            if len(parts) != 3:
                raise tensorio.FormatError(f"{path}:{n}: expected 'id descriptor_path feature_path'")
            sid, dp, fp = parts
            rows.append((sid, path.parent / dp, path.parent / fp))
    return header, rows


def ingest(manifest_path, w: EncoderWeights, store: FeatureStore = None, quantized: bool = True) -> FeatureStore:
    """Load a feature dump listed in a manifest into a (new or existing) store."""
    header, rows = read_manifest(manifest_path)
    s = w.config.num_scales
    store = FeatureStore(s, quantized) if store is None else store
    want_d = int(header["descriptor_dim"]) if "descriptor_dim" in header else None
    want_c = int(header["feature_channels"]) if "feature_channels" in header else w.config.feature_channels
    for sid, dp, fp in rows:
        d = tensorio.load_tensor(dp).reshape(-1)
        if want_d is None:
            want_d = d.shape[0]
        if d.shape[0] != want_d:
            raise tensorio.FormatError(f"{dp}: descriptor dim {d.shape[0]} drifts from {want_d}")
        f = tensorio.load_tensor(fp)
        if f.ndim != 3 or f.shape[0] != want_c:
            raise tensorio.FormatError(f"{fp}: feature map shape {f.shape} drifts from {want_c} channels")
        add_feature_map(store, sid, d, f, w)
    return store
