"""End-to-end acceptance checks, one test per criterion.

Each criterion prints a PASS/FAIL line and is summarized again at the end of
the pytest run. The toy training run is shared by criteria 4 to 6.
"""
import math
import subprocess
import sys
import time

import numpy as np
import pytest

import corrverify.objectives as objectives
from corrverify import retrieval
from corrverify.correlation import (
    FeaturePyramid,
    ReducerWeights,
    assemble_cross_scale,
    build_pyramid,
    correlate,
    init_reducer,
    reduce_scalewise,
    reduce_scalewise_backward,
)
from corrverify.encoder4d import (
    CenterPivotKernel,
    EncoderConfig,
    conv4d_center_pivot,
    conv4d_naive,
    embed_center_pivot,
    encoder_backward,
    encoder_forward,
    encoder_forward_batch,
    encoder_forward_train,
    init_weights,
)
from corrverify.numerics import grad_check, l2_normalize
from corrverify.objectives import (
    DescriptorBank,
    MarginState,
    classification_loss,
    contrastive_loss,
    queue_update,
    rerank_batch_loss,
    rerank_pair_loss,
    rerank_total_loss,
)
from corrverify.toydata import ToyConfig, make_dataset
from corrverify.training import (
    CurriculumSchedule,
    TrainConfig,
    mine_hard_negatives,
    pair_accuracy,
    schedule_at,
    toy_encoder_config,
    toy_pairs,
    train_rerank_toy,
)

from conftest import brute_force_volume, cosine_loops, record_acceptance

TOY = ToyConfig()
STEPS = 2000
CORPUS_SEED = 7
QUERIES = 20
K = 50


@pytest.fixture(scope="module")
def trained():
    """Curriculum run and the random-negative ablation on the same data and seed."""
    data = make_dataset(TOY, 100, seed=1)
    t0, c0 = time.perf_counter(), time.process_time()
    main = train_rerank_toy(data, TrainConfig(steps=STEPS), CurriculumSchedule(STEPS), toy_encoder_config())
    wall, cpu = time.perf_counter() - t0, time.process_time() - c0
    ablation = train_rerank_toy(data, TrainConfig(steps=STEPS), CurriculumSchedule(STEPS), toy_encoder_config(),
                                fixed_r_h=0.0)
    return main, ablation, wall, cpu


@pytest.fixture(scope="module")
def heldout():
    held = make_dataset(TOY, 20, seed=2, id_prefix="h")
    hni = mine_hard_negatives(list(zip(held.ids, held.labels.tolist(), held.descriptors)))
    return held, toy_pairs(held, np.random.default_rng(0)), toy_pairs(held, np.random.default_rng(1), hni)


@pytest.fixture(scope="module")
def corpus(trained):
    """500-image toy corpus in quantized and float stores, with 20 queries held in the database."""
    w = trained[0].weights
    data = make_dataset(TOY, 500 // TOY.num_classes, seed=CORPUS_SEED)
    stores = {}
    for quantized in (True, False):
        store = retrieval.FeatureStore(w.config.num_scales, quantized)
        for sid, f, d in zip(data.ids, data.features, data.descriptors):
            retrieval.add_feature_map(store, sid, d, f, w)
        stores[quantized] = store
    queries = sorted(np.random.default_rng(1).choice(len(data), QUERIES, replace=False).tolist())
    relevance = {data.ids[q]: {data.ids[j] for j in np.flatnonzero(data.labels == data.labels[q]) if j != q}
                 for q in queries}
    return data, stores, relevance


def run_map(store, relevance, w, rerank):
    out = {}
    for qid in relevance:
        rl = retrieval.global_rank(qid, store, exclude={qid})
        out[qid] = retrieval.rerank_topk(qid, rl, K, w, retrieval.ALPHA, store) if rerank else rl
    return retrieval.eval_map(out, relevance)


# ---------------------------------------------------------------------------


def test_1_center_pivot_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(500):
        cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
        ext = tuple(int(v) for v in rng.integers(1, 5, size=4))
        sq, sk = (int(v) for v in rng.integers(1, 3, size=2))
        x = rng.standard_normal((cin,) + ext)
        k = CenterPivotKernel(rng.standard_normal((cout, cin, 3, 3)), rng.standard_normal((cout, cin, 3, 3)),
                              rng.standard_normal(cout))
        ref = conv4d_naive(x, embed_center_pivot(k), sq, sk, bias=k.bias)
        worst = max(worst, float(np.max(np.abs(conv4d_center_pivot(x, k, sq, sk) - ref))))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-5 and secs < 30
    record_acceptance(1, "center-pivot matches naive 4D conv on 500 instances", ok,
                      f"max abs err {worst:.2e}, {secs:.1f} s")
    assert ok


def _unchecked(fn):
    """Evaluate a descriptor loss at off-sphere points for finite differences."""
    def call(*args):
        saved = objectives._check_unit
        objectives._check_unit = lambda *a, **k: None
        try:
            return fn(*args).value
        finally:
            objectives._check_unit = saved
    return call


def test_2_gradient_suite():
    rng = np.random.default_rng(77)
    t0 = time.perf_counter()
    failures, worst_op, worst_loss = [], 0.0, 0.0

    def check(label, f, x, g, tol):
        nonlocal worst_op, worst_loss
        rep = grad_check(f, x, g, eps=1e-3)
        if tol == 1e-2:
            worst_op = max(worst_op, rep.max_rel_diff)
        else:
            worst_loss = max(worst_loss, rep.max_rel_diff)
        if not rep.ok(tol):
            failures.append((label, rep))

    # scale-wise reducer
    pyr = build_pyramid(rng.standard_normal((4, 6, 5)), 3)
    red = init_reducer(3, 4, 5, rng, np.float64)
    out, cache = reduce_scalewise(pyr, red, keep=True)
    gys = [rng.standard_normal(lv.shape) for lv in out.levels]
    g = reduce_scalewise_backward(gys, red, cache)
    for i in range(3):
        def f_k(v, i=i):
            ks = list(red.kernels)
            ks[i] = v
            return sum(np.sum(a * b) for a, b in zip(reduce_scalewise(pyr, ReducerWeights(ks, red.biases)).levels, gys))

        def f_b(v, i=i):
            bs = list(red.biases)
            bs[i] = v
            return sum(np.sum(a * b) for a, b in zip(reduce_scalewise(pyr, ReducerWeights(red.kernels, bs)).levels, gys))

        check(f"reducer.{i}.weight", f_k, red.kernels[i], g.kernels[i], 1e-2)
        check(f"reducer.{i}.bias", f_b, red.biases[i], g.biases[i], 1e-2)

    # every 4D block and the MLP, through the pair loss. A 1e-3 step only
    # measures a derivative where no ReLU flips inside the step, so the check
    # point keeps each channel clearly on or off: group-norm offsets of +-4
    # and hidden MLP biases of +-1. The deepest block keeps 2^4 positions so
    # every normalization group sees more than two values.
    cfg = EncoderConfig(num_scales=2, feature_channels=3, reduced_channels=4, block_channels=(8, 8),
                        convs_per_block=2, mlp_hidden=6)
    for _ in range(3):
        w = init_weights(cfg, rng, np.float64)
        for name, v in w.params.items():
            if name.endswith(("conv0.bias", "conv1.bias")):
                w.params[name] = 0.1 * rng.standard_normal(v.shape)
            elif name.endswith("gn.bias"):
                w.params[name] = 4.0 * np.resize([1.0, -1.0], v.shape) + 0.1 * rng.standard_normal(v.shape)
            elif name == "mlp.fc1.bias":
                w.params[name] = np.resize([1.0, -1.0], v.shape)
        vols = rng.random((3, 4, 4, 4, 4, 4))
        labels = np.array([1, 0, 1])
        logits, cache = encoder_forward_train(vols, w)
        grads, _ = encoder_backward(cache, rerank_batch_loss(logits, labels)[1], w)
        for name in sorted(grads):
            def f_p(v, name=name, w=w, vols=vols, labels=labels):
                ww = w.copy()
                ww.params[name] = v
                return rerank_batch_loss(encoder_forward_batch(vols, ww), labels)[0]
            check(name, f_p, w.params[name], grads[name], 1e-2)

    # descriptor and logit losses at the training temperature and margin
    for seed in range(10):
        r = np.random.default_rng(seed)
        bank = DescriptorBank(r.standard_normal((6, 8)), 12)
        for i in range(12):
            queue_update(bank, l2_normalize(r.standard_normal(8)), i % 6)
        st = MarginState(t=float(r.uniform(0, 1)))
        d = l2_normalize(r.standard_normal(8))
        lc = classification_loss(d, bank, 1, st)
        lk = contrastive_loss(d, bank, 1, st)
        cls = _unchecked(classification_loss)
        con = _unchecked(contrastive_loss)

        def f_w(wm, bank=bank, st=st, d=d):
            b = DescriptorBank(np.eye(1, 8), 1)
            b.class_weights = wm
            return cls(d, b, 1, st)

        check("cls.dq", lambda v, bank=bank, st=st: cls(v, bank, 1, st), d, lc.grads["dq"], 1e-3)
        check("cls.W", f_w, bank.class_weights, lc.grads["W"], 1e-3)
        check("con.dq", lambda v, bank=bank, st=st: con(v, bank, 1, st), d, lk.grads["dq"], 1e-3)
        z = r.standard_normal((4, 2)) * 3
        for y in (True, False):
            check("pair", lambda v, y=y: rerank_pair_loss(v, y).value, z[0], rerank_pair_loss(z[0], y).grads["z"],
                  1e-3)
        tot = rerank_total_loss(*z)
        for i, name in enumerate(("z_qp", "z_pq", "z_qn", "z_nq")):
            def f_z(v, i=i, z=z):
                zz = z.copy()
                zz[i] = v
                return rerank_total_loss(*zz).value
            check(f"total.{name}", f_z, z[i], tot.grads[name], 1e-3)

    secs = time.perf_counter() - t0
    ok = not failures and secs < 120
    record_acceptance(2, "finite-difference gradient suite at eps=1e-3", ok,
                      f"worst rel {worst_op:.1e} (ops) / {worst_loss:.1e} (losses), "
                      f"{len(failures)} failures, {secs:.1f} s")
    assert ok, failures


def test_3_correlation():
    rng = np.random.default_rng(31)
    worst_oracle = worst_sym = 0.0
    for _ in range(100):
        s = int(rng.integers(1, 4))
        c = int(rng.integers(1, 6))
        hq, wq, hk, wk = (int(v) for v in rng.integers(2, 6, size=4))
        pq = build_pyramid(rng.standard_normal((c, hq, wq)), s)
        pk = build_pyramid(rng.standard_normal((c, hk, wk)), s)
        v = assemble_cross_scale(pq, pk).volume
        w = assemble_cross_scale(pk, pq).volume
        worst_oracle = max(worst_oracle, float(np.max(np.abs(correlate(pq.levels[-1], pk.levels[0])
                                                             - cosine_loops(pq.levels[-1], pk.levels[0])))))
        worst_oracle = max(worst_oracle, float(np.max(np.abs(v - brute_force_volume(pq, pk)))))
        for a in range(s):
            for b in range(s):
                gap = np.abs(v[a * s + b] - w[b * s + a].transpose(2, 3, 0, 1))
                worst_sym = max(worst_sym, float(gap.max()))
    ok = worst_oracle <= 1e-6 and worst_sym <= 1e-6
    record_acceptance(3, "correlation matches loop oracle and is query/key symmetric on 100 pairs", ok,
                      f"oracle err {worst_oracle:.1e}, symmetry err {worst_sym:.1e}")
    assert ok


@pytest.mark.slow
def test_4_toy_training(trained, heldout):
    main, ablation, wall, cpu = trained
    held, (pairs, labels), (hard_pairs, hard_labels) = heldout
    acc = pair_accuracy(held.features, pairs, labels, main.weights)
    hard = pair_accuracy(held.features, hard_pairs, hard_labels, main.weights)
    hard_abl = pair_accuracy(held.features, hard_pairs, hard_labels, ablation.weights)
    drop = (hard - hard_abl) / hard
    # process CPU time bounds the single-core wall time from above
    ok = acc >= 0.95 and len(main.curve) <= 2000 and cpu < 600 and drop >= 0.10
    record_acceptance(4, "toy training reaches held-out accuracy and the curriculum ablation drops", ok,
                      f"acc {acc:.4f}, hard-pair acc {hard:.4f} vs {hard_abl:.4f} without curriculum "
                      f"(relative drop {drop:.2f}), {len(main.curve)} steps, {wall:.0f} s wall / {cpu:.0f} s cpu")
    assert ok


@pytest.mark.slow
def test_5_rerank_lifts_map(trained, corpus):
    w = trained[0].weights
    _, stores, relevance = corpus
    g = run_map(stores[True], relevance, w, rerank=False)
    r = run_map(stores[True], relevance, w, rerank=True)
    ok = r - g >= 0.05
    record_acceptance(5, "re-ranking top-50 lifts mAP on the 500-image corpus", ok,
                      f"global {g:.4f} -> reranked {r:.4f}, lift {r - g:+.4f}")
    assert ok


@pytest.mark.slow
def test_6_quantization(trained, corpus):
    w = trained[0].weights
    _, stores, relevance = corpus
    qb, fb = stores[True].payload_bytes(), stores[False].payload_bytes()
    mq = run_map(stores[True], relevance, w, rerank=True)
    mf = run_map(stores[False], relevance, w, rerank=True)
    ok = 4 * qb == fb and abs(mq - mf) <= 0.005
    record_acceptance(6, "8-bit store is 4x smaller and keeps re-ranked mAP", ok,
                      f"{fb} -> {qb} bytes (x{fb / qb:.2f}), mAP {mf:.4f} float vs {mq:.4f} quantized")
    assert ok


def test_7_schedule_endpoints():
    sch = CurriculumSchedule(STEPS)
    start, end = schedule_at(sch, 0), schedule_at(sch, STEPS)
    ok = start == (0.2, 0.0) and end == (1.0, 0.2)
    record_acceptance(7, "curriculum endpoints are exact", ok, f"step 0 -> {start}, step {STEPS} -> {end}")
    assert ok


CLI_CONFIG = """\
steps = 20
batch_size = 4
seed = 3
train_per_class = 8
heldout_per_class = 4
"""


def _cli(*args):
    proc = subprocess.run([sys.executable, "-m", "corrverify.cli", *map(str, args)], capture_output=True, check=True)
    return proc.stdout


def test_8_cli_determinism(tmp_path):
    (tmp_path / "cfg.txt").write_text(CLI_CONFIG)
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        logs = [
            _cli("train-toy", "--config", tmp_path / "cfg.txt", "--out", d / "w.cvw", "--curve", d / "curve.csv"),
            _cli("make-toy", "--out", d / "toy", "--images", 40, "--queries", 4, "--seed", 9),
            _cli("ingest", "--manifest", d / "toy" / "manifest.txt", "--weights", d / "w.cvw", "--out", d / "store"),
            _cli("rank", "--query", d / "toy" / "queries.txt", "--store", d / "store", "--top", 30,
                 "--out", d / "g.csv"),
            _cli("rerank", "--query", d / "toy" / "queries.txt", "--store", d / "store", "--weights", d / "w.cvw",
                 "--k", 10, "--alpha", 0.5, "--exclude-self", "--out", d / "r.csv"),
            _cli("eval", "--ranks", d / "r.csv", "--truth", d / "toy" / "truth.csv", "--cutoff", 20),
        ]
        files = {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}
        outputs.append((logs, files))
    (logs_a, files_a), (logs_b, files_b) = outputs
    differing = sorted(str(k) for k in files_a.keys() | files_b.keys() if files_a.get(k) != files_b.get(k))
    ok = logs_a == logs_b and not differing and len(files_a) > 80
    record_acceptance(8, "every CLI command is byte-identical across two runs", ok,
                      f"{len(files_a)} files and 6 stdout streams compared, {len(differing)} differ")
    assert ok, differing


# ---------------------------------------------------------------------------
# further end-to-end behaviour of the trained model


@pytest.mark.slow
def test_training_loss_is_small(trained):
    main = trained[0]
    assert main.curve[-1][1] < 0.1 * math.log(2)


@pytest.mark.slow
def test_identical_pair_beats_zero_volume(trained, heldout):
    w = trained[0].weights
    held = heldout[0]
    zero = encoder_forward(np.zeros((9, 8, 8, 8, 8), np.float32), w)
    for f in held.features[:5]:
        pyr = reduce_scalewise(build_pyramid(f, 3), w.reducer)
        z = encoder_forward(assemble_cross_scale(pyr, pyr), w)
        assert z.z1 - z.z0 > zero.z1 - zero.z0


@pytest.mark.slow
def test_rank_three_match_promoted(trained, corpus):
    w = trained[0].weights
    data, stores, _ = corpus
    store = stores[True]
    found = 0
    for q in range(100):
        qid = data.ids[q]
        rl = retrieval.global_rank(qid, store, exclude={qid})
        match = [i for i, sid in enumerate(rl.ids) if data.labels[data.ids.index(sid)] == data.labels[q]]
        if match[0] != 2:
            continue
        found += 1
        out = retrieval.rerank_topk(qid, rl, K, w, retrieval.ALPHA, store)
        assert out.ids[0] == rl.ids[2]
    assert found >= 3
