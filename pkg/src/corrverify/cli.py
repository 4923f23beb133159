"""Command-line interface.

    corrverify make-toy --out corpus/ [--images 500 --queries 20 --seed 0 --config toy.txt]
    corrverify train-toy --config cfg.txt --out weights.cvw [--curve curve.csv]
    corrverify ingest --manifest m.txt --weights w.cvw --out store/ [--no-quantize]
    corrverify rank --query q.id --store store/ --top 400 --out ranks.csv
    corrverify rerank --query q.id --store store/ --weights w.cvw --k 100 --alpha 0.5 --out ranks.csv
    corrverify eval --ranks ranks.csv --truth truth.csv [--cutoff 100]

Every numeric value is printed with 6 decimal digits; given the same inputs
and seeds, every command writes byte-identical output.
"""
from __future__ import annotations

import argparse
import dataclasses
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import retrieval, tensorio
from .encoder4d import EncoderConfig, load_weights, save_weights
from .toydata import ToyConfig, make_dataset
from .training import (
    CurriculumSchedule,
    TrainConfig,
    pair_accuracy,
    toy_encoder_config,
    toy_pairs,
    train_rerank_toy,
)

log = logging.getLogger("corrverify")

TOY_PREFIX = "toy."
EXTRA_KEYS = {"train_per_class": int, "heldout_per_class": int, "fixed_r_h": float, "fixed_p_has": float}


# ---------------------------------------------------------------------------
# config files


def _cast(value: str, default):
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.replace("(", "").replace(")", "").split(",") if v.strip())
    return value


def _defaults(cls):
    return {f.name: f.default for f in dataclasses.fields(cls) if f.default is not dataclasses.MISSING}


def parse_config(text: str, source: str = "<config>"):
    """Parse ``key = value`` lines into the training, curriculum, encoder and toy configs.

    Toy-generator keys carry a ``toy.`` prefix. Returns
    ``(TrainConfig, CurriculumSchedule, EncoderConfig, ToyConfig, extras)``.
    """
    raw = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in raw:
            raise ValueError(f"{source}:{n}: duplicate key {k!r}")
        raw[k] = v

    toy_d = _defaults(ToyConfig)
    toy = {}
    for k in [k for k in raw if k.startswith(TOY_PREFIX)]:
        name = k[len(TOY_PREFIX):]
        if name not in toy_d:
            raise ValueError(f"{source}: unknown key {k!r}")
        toy[name] = _cast(raw.pop(k), toy_d[name])
    toy_cfg = ToyConfig(**toy)

    train_d, sched_d = _defaults(TrainConfig), _defaults(CurriculumSchedule)
    enc_d = dataclasses.asdict(toy_encoder_config(toy_cfg.channels))
    train, sched, enc, extras = {}, {}, {}, {}
    for k, v in raw.items():
        if k in train_d:
            train[k] = _cast(v, train_d[k])
        elif k in sched_d or k == "total_steps":
            sched[k] = int(v) if k == "total_steps" else _cast(v, sched_d[k])
        elif k in enc_d:
            enc[k] = _cast(v, enc_d[k])
        elif k in EXTRA_KEYS:
            extras[k] = EXTRA_KEYS[k](v)
        else:
            raise ValueError(f"{source}: unknown key {k!r}")
    train_cfg = TrainConfig(**train)
    sched.setdefault("total_steps", train_cfg.steps)
    enc_d.update(enc)
    return train_cfg, CurriculumSchedule(**sched), EncoderConfig(**enc_d), toy_cfg, extras


def _read_config(path):
    if path is None:
        return parse_config("")
    return parse_config(Path(path).read_text(), str(path))


def _read_queries(arg: str):
    p = Path(arg)
    if p.is_file():
        ids = [line.strip() for line in p.read_text().splitlines()]
        ids = [i for i in ids if i and not i.startswith("#")]
        if not ids:
            raise ValueError(f"{p}: no query ids")
        return ids
    return [arg]


def _write_text(path, text: str):
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


# ---------------------------------------------------------------------------
# commands


def cmd_train_toy(args):
    train_cfg, sched, enc_cfg, toy_cfg, extras = _read_config(args.config)
    data = make_dataset(toy_cfg, extras.get("train_per_class", 100), seed=train_cfg.seed + 1)
    res = train_rerank_toy(data, train_cfg, sched, enc_cfg,
                           fixed_r_h=extras.get("fixed_r_h"), fixed_p_has=extras.get("fixed_p_has"))
    save_weights(args.out, res.weights)
    buf = io.StringIO()
    buf.write("step,loss,lr,r_h,p_has\n")
    for step, loss, lr, r_h, p_has in res.curve:
        buf.write(f"{step},{loss:.6f},{lr:.6f},{r_h:.6f},{p_has:.6f}\n")
    _write_text(args.curve, buf.getvalue())
    log.info("trained %d steps in %.1f s", train_cfg.steps, res.seconds)
    held = make_dataset(toy_cfg, extras.get("heldout_per_class", 20), seed=train_cfg.seed + 2, id_prefix="h")
    pairs, labels = toy_pairs(held, np.random.default_rng(train_cfg.seed + 3))
    acc = pair_accuracy(held.features, pairs, labels, res.weights)
    print(f"final_loss = {res.curve[-1][1]:.6f}")
    print(f"heldout_pair_accuracy = {acc:.6f}")
    return 0


def cmd_make_toy(args):
    _, _, _, toy_cfg, _ = _read_config(args.config)
    per_class, rem = divmod(args.images, toy_cfg.num_classes)
    if rem or per_class < 2:
        raise ValueError(f"--images must be a multiple of the {toy_cfg.num_classes} classes, at least 2 each")
    data = make_dataset(toy_cfg, per_class, seed=args.seed, id_prefix="img")
    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "descriptors").mkdir(parents=True, exist_ok=True)
    lines = [f"descriptor_dim = {data.descriptors.shape[1]}", f"feature_channels = {toy_cfg.channels}"]
    for sid, f, d in zip(data.ids, data.features, data.descriptors):
        tensorio.save_tensor(out / "features" / f"{sid}.cvt", f)
        tensorio.save_tensor(out / "descriptors" / f"{sid}.cvt", d)
        lines.append(f"{sid} descriptors/{sid}.cvt features/{sid}.cvt")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    rng = np.random.default_rng(args.seed + 1)
    queries = sorted(rng.choice(len(data), size=args.queries, replace=False).tolist())
    truth = ["query_id,relevant_id"]
    for q in queries:
        for j in np.flatnonzero(data.labels == data.labels[q]):
            if j != q:
                truth.append(f"{data.ids[q]},{data.ids[j]}")
    (out / "truth.csv").write_text("\n".join(truth) + "\n")
    (out / "queries.txt").write_text("".join(f"{data.ids[q]}\n" for q in queries))
    print(f"images = {len(data)}")
    print(f"queries = {len(queries)}")
    return 0


def cmd_ingest(args):
    w = load_weights(args.weights)
    store = retrieval.ingest(args.manifest, w, quantized=not args.no_quantize)
    retrieval.export(store, args.out)
    print(f"count = {len(store)}")
    print(f"payload_bytes = {store.payload_bytes()}")
    return 0


def _rank_all(args, store):
    out = {}
    for qid in _read_queries(args.query):
        if qid not in store:
            raise KeyError(f"query {qid!r} not in store")
        exclude = {qid} if args.exclude_self else ()
        out[qid] = retrieval.global_rank(qid, store, top=args.top, exclude=exclude)
    return out


def _emit_ranks(args, rankings):
    buf = io.StringIO()
    retrieval.write_ranks(buf, rankings)
    _write_text(args.out, buf.getvalue())


def cmd_rank(args):
    store = retrieval.load_store(args.store)
    _emit_ranks(args, _rank_all(args, store))
    return 0


def cmd_rerank(args):
    store = retrieval.load_store(args.store)
    w = load_weights(args.weights)
    rankings = _rank_all(args, store)
    out = {}
    for qid, rl in rankings.items():
        out[qid] = retrieval.rerank_topk(qid, rl, min(args.k, len(rl)), w, args.alpha, store)
    _emit_ranks(args, out)
    return 0


def cmd_eval(args):
    ranks = retrieval.read_ranks(args.ranks)
    truth = retrieval.read_truth(args.truth)
    print(f"mAP = {retrieval.eval_map(ranks, truth, args.cutoff):.6f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="corrverify", description=__doc__.split("\n", 1)[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-toy", help="train the re-ranker on synthetic planted-pattern maps")
    s.add_argument("--config", help="key = value config file (defaults apply when omitted)")
    s.add_argument("--out", required=True, help="output weights file (.cvw)")
    s.add_argument("--curve", help="loss-curve CSV path (default: stdout)")
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("make-toy", help="write a synthetic feature dump with manifest and truth")
    s.add_argument("--out", required=True)
    s.add_argument("--images", type=int, default=500)
    s.add_argument("--queries", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="config file; only toy.* keys are used")
    s.set_defaults(func=cmd_make_toy)

    s = sub.add_parser("ingest", help="build a feature store from a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--weights", required=True, help="weights whose reducer builds the stored pyramids")
    s.add_argument("--out", required=True)
    s.add_argument("--no-quantize", action="store_true", help="keep float32 pyramids")
    s.set_defaults(func=cmd_ingest)

    for name, helptext in (("rank", "global ranking"), ("rerank", "global ranking plus top-k re-ranking")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--query", required=True, help="query id, or a file with one id per line")
        s.add_argument("--store", required=True)
        s.add_argument("--top", type=int, default=None, help="truncate the list (default: whole store)")
        s.add_argument("--out", help="ranks CSV path (default: stdout)")
        s.add_argument("--exclude-self", action="store_true", help="drop the query id from its own list")
        if name == "rerank":
            s.add_argument("--weights", required=True)
            s.add_argument("--k", type=int, default=100)
            s.add_argument("--alpha", type=float, default=retrieval.ALPHA)
            s.set_defaults(func=cmd_rerank)
        else:
            s.set_defaults(func=cmd_rank)

    s = sub.add_parser("eval", help="mAP of a ranks CSV against a truth CSV")
    s.add_argument("--ranks", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--cutoff", type=int, default=None)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
