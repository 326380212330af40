"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v -s`` to see the criterion lines
inline; without ``-s`` they still appear because printing bypasses capture.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from knn_finetune.attack import SynonymLexicon
from knn_finetune.cli import attack_report, main
from knn_finetune.config import load_config
from knn_finetune.data import FeaturizerConfig, featurize_many, load_dataset
from knn_finetune.encoder import EncoderParams, HeadParams, encode, encoder_backward, head_backward, linear_head
from knn_finetune.knn import AnchorIndex, combined_predict, knn_vote
from knn_finetune.losses import (
    cross_entropy,
    info_nce,
    select_positives,
    softmax,
    supervised_contrastive_full,
    supervised_contrastive_selected,
)
from knn_finetune.moco import ContrastQueue, momentum_update, partition_by_label
from knn_finetune.trainer import TrainConfig, init_state, run_experiment, run_seed, train_step
from oracles import brute_vote, plain_ce_train, replay, toy_dataset

CORPORA = Path(__file__).resolve().parents[1] / "src" / "knn_finetune" / "corpora"


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return emit


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# --- 1: gradients through the encoder -------------------------------------------


def _objectives(query, head, x, label, pos, neg, tau, lam, sel):
    """Five scalar objectives of the encoder/head parameters and their analytic gradients."""
    rep = encode(query, x)
    logits = linear_head(head, rep.h)
    ce = cross_entropy(logits, label)
    terms = {
        "single": info_nce(rep.z, pos[0], neg, tau),
        "full": supervised_contrastive_full(rep.z, pos, neg, tau),
        "selected": supervised_contrastive_selected(rep.z, pos[sel], neg, tau),
    }
    out = {}
    for name, t in terms.items():
        hg, gh = head_backward(head, rep.h, np.zeros_like(logits))
        eg, _ = encoder_backward(query, x, gh, t.grad)
        out[name] = (t.value, eg, hg)
    hg, gh = head_backward(head, rep.h, ce.grad)
    eg, _ = encoder_backward(query, x, gh, None)
    out["ce"] = (ce.value, eg, hg)
    hg, gh = head_backward(head, rep.h, (1 - lam) * ce.grad)
    eg, _ = encoder_backward(query, x, gh, lam * terms["selected"].grad)
    out["combined"] = ((1 - lam) * ce.value + lam * terms["selected"].value, eg, hg)
    return out


def _instance_error(rng, tau=0.07, lam=0.5, step=1e-6):
    D, H, d, C = 6, 5, 8, 3
    query = EncoderParams(rng.normal(size=(D, H)) * 0.5, rng.normal(size=H) * 0.1,
                          rng.normal(size=(H, d)) * 0.5, rng.normal(size=d) * 0.1)
    head = HeadParams(rng.normal(size=(d, C)), rng.normal(size=C))
    x, label = rng.normal(size=D), int(rng.integers(C))
    pos, neg = unit_rows(rng, 5, d), unit_rows(rng, 20, d)
    z0 = encode(query, x).z
    # selection is piecewise constant in q; hold it fixed for the difference quotients
    sel = select_positives(z0, pos, np.arange(5), 2, 1)
    base = _objectives(query, head, x, label, pos, neg, tau, lam, sel)
    worst = 0.0
    for group, params in (("enc", query), ("head", head)):
        arrays = params.as_dict()
        for pname, arr in arrays.items():
            for idx in np.ndindex(arr.shape):
                vals = []
                for sgn in (1.0, -1.0):
                    dd = {k: v.copy() for k, v in arrays.items()}
                    dd[pname][idx] += sgn * step
                    p = type(params).from_dict(dd)
                    q, h = (p, head) if group == "enc" else (query, p)
                    vals.append(_objectives(q, h, x, label, pos, neg, tau, lam, sel))
                for name, (_, eg, hg) in base.items():
                    num = (vals[0][name][0] - vals[1][name][0]) / (2 * step)
                    ana = (eg if group == "enc" else hg)[pname][idx]
                    worst = max(worst, abs(ana - num) / max(1.0, abs(num)))
    return worst


def test_criterion_1_gradient_correctness(report):
    t = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = max(_instance_error(rng) for _ in range(100))
    elapsed = time.perf_counter() - t
    ok = worst < 1e-4 and elapsed < 30
    report(1, ok, f"max relative error {worst:.2e} over 100 instances (< 1e-4), {elapsed:.1f}s (< 30s)")
    assert worst < 1e-4
    assert elapsed < 30


# --- 2: reduction identities ----------------------------------------------------


def test_criterion_2_reductions(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        q, kp, negs = unit_rows(rng, 1, 8)[0], unit_rows(rng, 1, 8)[0], unit_rows(rng, 20, 8)
        ref = info_nce(q, kp, negs, 0.07)
        for t in (supervised_contrastive_full(q, [kp], negs, 0.07),
                  supervised_contrastive_selected(q, [kp], negs, 0.07)):
            worst = max(worst, abs(t.value - ref.value), float(np.max(np.abs(t.grad - ref.grad))))
    reductions_ok = worst <= 1e-12

    index = AnchorIndex(unit_rows(rng, 50, 8), rng.integers(0, 3, size=50), np.arange(50), 3)
    endpoints_ok = True
    for _ in range(50):
        logits, z = rng.normal(size=3) * 3, unit_rows(rng, 1, 8)[0]
        vote = knn_vote(z, index, 5)
        endpoints_ok &= np.array_equal(combined_predict(logits, vote, 0.0), softmax(logits))
        endpoints_ok &= np.array_equal(combined_predict(logits, vote, 1.0), vote)

    ds = toy_dataset(n_per_class=20)
    feat = FeaturizerConfig(dimension=128)
    cfg = TrainConfig(lam=0.0, momentum=0.9, n_most=2, n_least=1, queue_capacity=64, batch_size=4,
                      lr=1e-2, hidden_dim=16, embed_dim=8)
    state = init_state(3, feat.dimension, 3, cfg)
    X, y = featurize_many(ds.texts, feat), ds.labels
    steps = 0
    while steps < 200:
        order = state.rng.permutation(len(y))
        for s in range(0, len(y), cfg.batch_size):
            if steps == 200:
                break
            idx = order[s : s + cfg.batch_size]
            train_step(state, X[idx], y[idx], cfg)
            steps += 1
    enc, head = plain_ce_train(ds, feat, cfg, 3, 200)
    bit_ok = all(a.tobytes() == b.tobytes() for a, b in zip(
        [*state.query.as_dict().values(), state.head.W, state.head.b],
        [*enc.as_dict().values(), head.W, head.b]))

    ok = reductions_ok and endpoints_ok and bit_ok
    report(2, ok, f"loss reductions max diff {worst:.1e} (<= 1e-12); phi endpoints exact: {endpoints_ok}; "
                  f"lambda=0 bit-identical to CE over 200 steps: {bit_ok}")
    assert reductions_ok and endpoints_ok and bit_ok


# --- 3: momentum contraction ----------------------------------------------------


def test_criterion_3_momentum_decay(report):
    rng = np.random.default_rng(3)
    dims = (20, 10, 6)

    def rand():
        D, H, d = dims
        return EncoderParams(rng.normal(size=(D, H)), rng.normal(size=H), rng.normal(size=(H, d)), rng.normal(size=d))

    def dist(a, b):
        return np.sqrt(sum(np.sum((x - y) ** 2) for x, y in zip(a.as_dict().values(), b.as_dict().values())))

    q, k = rand(), rand()
    d0 = dist(k, q)
    worst = 0.0
    for t in range(1, 1001):
        k = momentum_update(k, q, 0.999)
        worst = max(worst, abs(dist(k, q) / d0 - 0.999**t) / 0.999**t)
    ok = worst <= 1e-10
    report(3, ok, f"max relative deviation from m^T over T=1..1000: {worst:.2e} (<= 1e-10)")
    assert ok


# --- 4: KNN oracle equivalence --------------------------------------------------


def test_criterion_4_knn_oracle(report):
    t = time.perf_counter()
    rng = np.random.default_rng(4)
    n, d, C = 1000, 8, 5
    Z = unit_rows(rng, n, d)
    Z[rng.integers(0, n, size=200)] = Z[1]  # exact ties
    Z[rng.integers(0, n, size=100)] = Z[2]
    index = AnchorIndex(Z, rng.integers(0, C, size=n), rng.permutation(5 * n)[:n], C)
    queries = np.vstack([Z[1], Z[2], unit_rows(rng, 18, d)])
    mismatches = 0
    for q in queries:
        for k in (1, 5, 10, 50):
            got = knn_vote(q, index, k)
            mismatches += not np.array_equal(got, brute_vote(q, index.z, index.labels, index.ids, C, k))
    elapsed = time.perf_counter() - t
    ok = mismatches == 0 and elapsed < 10
    report(4, ok, f"{mismatches} mismatches over 20 queries x K in {{1,5,10,50}} on 1000 anchors, {elapsed:.1f}s (< 10s)")
    assert mismatches == 0
    assert elapsed < 10


# --- 5: queue semantics ---------------------------------------------------------


def test_criterion_5_queue(report):
    rng = np.random.default_rng(5)
    q = ContrastQueue(128, 4)
    pushes = []
    partition_ok = True
    for _ in range(10_000):
        b = int(rng.integers(1, 9))
        z, labels = unit_rows(rng, b, 4), rng.integers(0, 4, size=b)
        pushes.append((z, labels))
        q.push(z, labels)
        snap = q.snapshot()
        pos, neg = partition_by_label(snap, int(rng.integers(0, 5)))
        partition_ok &= len(pos) + len(neg) == len(snap) and np.array_equal(
            np.sort(np.concatenate([pos, neg])), np.arange(len(snap)))
    want = replay(pushes, 128)
    snap = q.snapshot()
    contents_ok = (
        np.array_equal(snap.z, np.array([w[0] for w in want]))
        and np.array_equal(snap.labels, [w[1] for w in want])
        and np.array_equal(snap.ids, [w[2] for w in want])
    )
    ok = contents_ok and partition_ok
    report(5, ok, f"last-128 window equals replay: {contents_ok}; partition exact after every push: {partition_ok}")
    assert ok


# --- 6: desk-scale generalization -----------------------------------------------


def _experiment(name, **overrides):
    cfg = load_config(CORPORA / f"{name}.cfg", {k: str(v) for k, v in overrides.items()})
    return run_experiment(cfg.train, cfg.featurizer, cfg.train_path, cfg.test_path, cfg.num_classes,
                          cfg.seeds, cfg.few_shot_n or None)


def test_criterion_6_generalization(report):
    t = time.perf_counter()
    lines, ok = [], True
    for corpus in ("cluster4", "sentiment"):
        for few_shot in (0, 100):
            base = _experiment(corpus, few_shot_n=few_shot, **{"lambda": 0, "phi": 0})
            knn = _experiment(corpus, few_shot_n=few_shot)
            if few_shot == 0:
                cond = knn.mean >= base.mean - 0.005
                lines.append(f"{corpus} full: knn {knn.mean:.4f} vs ce {base.mean:.4f} (>= ce - 0.005): {cond}")
            else:
                ratio = knn.variance / base.variance if base.variance > 0 else float("inf")
                cond = knn.mean > base.mean and knn.variance <= 1.5 * base.variance
                lines.append(f"{corpus} n=100: knn {knn.mean:.4f} vs ce {base.mean:.4f}, "
                             f"variance ratio {ratio:.2f} (<= 1.5): {cond}")
            ok &= cond
    elapsed = time.perf_counter() - t
    ok &= elapsed < 300
    report(6, ok, "; ".join(lines) + f"; {elapsed:.0f}s (< 300s)")
    assert ok


# --- 7: robustness direction ----------------------------------------------------


def test_criterion_7_attack(report):
    t = time.perf_counter()
    cfg = load_config(CORPORA / "sentiment.cfg", {"attack_phis": "0,0.5,1", "attack_size": "100"})
    train_set = load_dataset(cfg.train_path, cfg.num_classes)
    test_set = load_dataset(cfg.test_path, cfg.num_classes)
    models = [(s, run_seed(cfg.train, cfg.featurizer, train_set, test_set, s).model) for s in cfg.seeds]
    rows, _ = attack_report(cfg, models, test_set, SynonymLexicon.load(cfg.lexicon_path))
    after = {phi: float(np.mean(a)) for phi, _, a in rows}
    per_run_ok = all(a <= c for _, clean, att in rows for c, a in zip(clean, att))
    elapsed = time.perf_counter() - t
    order_ok = after[1.0] >= after[0.5] >= after[0.0]
    gap_ok = after[1.0] - after[0.0] >= 0.02
    ok = order_ok and gap_ok and per_run_ok and elapsed < 300
    report(7, ok, f"after-attack phi=0: {after[0.0]:.3f}, phi=0.5: {after[0.5]:.3f}, phi=1: {after[1.0]:.3f}; "
                  f"ordered: {order_ok}; gap >= 0.02: {gap_ok}; after <= clean on every run: {per_run_ok}; "
                  f"{elapsed:.0f}s (< 300s)")
    assert ok


# --- 8: determinism -------------------------------------------------------------


def test_criterion_8_determinism(report, tmp_path):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(
        (CORPORA / "sentiment.cfg").read_text(encoding="utf-8").replace("sentiment_", str(CORPORA) + "/sentiment_")
        + "feature_dim = 256\nhidden_dim = 32\nembed_dim = 16\nepochs = 2\nseeds = 1,2\n"
        + "few_shot_n = 60\nattack_size = 10\n",
        encoding="utf-8",
    )
    files = {}
    for run in ("a", "b"):
        out = tmp_path / run
        common = ["--config", str(cfg_path), "--out", str(out)]
        codes = [
            main(["train", *common]),
            main(["eval", *common]),
            main(["sweep", *common, "--axis", "k", "--values", "1,5"]),
            main(["attack", *common]),
            main(["export-embeddings", "--checkpoint", str(out / "seed1.ckpt"), "--out", str(out)]),
        ]
        assert codes == [0] * 5
        files[run] = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
    same = files["a"] == files["b"]
    report(8, same, f"{len(files['a'])} output files byte-identical across two runs: {same}")
    assert same
