"""Acceptance checks, one test per criterion.

Each test records a ``PASS``/``FAIL`` line (see ``RESULTS``); the lines are
printed in the terminal summary, so ``pytest tests/test_acceptance.py`` shows
them without ``-s``.  Criterion 8 needs the public Reddit interaction file:
set ``APGNN_REDDIT_DATA`` to its path (tab-separated ``user item timestamp``
or the original ``username,subreddit,utc`` CSV) to enable it.
"""
import csv
import os
import sys
import time

import numpy as np
import pytest

from apgnn import data as D
from apgnn import synthetic
from apgnn.attention import SessionEmbeddingMatrix, attention_weights, history_attention, readout
from apgnn.graph import build_graph
from apgnn.gradcheck import MICRO, run_micro
from apgnn.metrics import itemknn_baseline, label_ranks, mrr_at_k, pop_baseline, recall_at_k
from apgnn.pgnn import AblationFlags, ParameterSet
from apgnn.tensor import Tensor
from apgnn.trainer import TrainConfig, Trainer, build_model, rank_instances

from .test_attention import attention_oracle, d, du, readout_oracle

RESULTS: list[str] = []


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ------------------------------------------------------------ 1 gradients


def test_1_gradient_fidelity():
    assert (MICRO["n_items"], MICRO["n_users"], MICRO["d"], MICRO["d_user"], MICRO["T"]) == (20, 3, 6, 4, 2)
    t0 = time.perf_counter()
    reports = [run_micro(seed, 64) for seed in range(3)]
    elapsed = time.perf_counter() - t0
    worst = max((r.worst for r in reports), key=lambda c: c.rel_err)
    ok = all(r.ok for r in reports) and all(r.tol == 1e-3 for r in reports) and elapsed < 120
    n_params = len(reports[0].checks)
    report(1, ok, f"micro gradcheck, 3 seeds x {n_params} tensors, worst {worst.name} rel_err={worst.rel_err:.2e} <= 1e-3, {elapsed:.1f}s < 120s")


# ---------------------------------------------------------------- 2 graph


def test_2_graph_oracle():
    rng = np.random.default_rng(2)
    bad, worst_row = 0, 0.0
    for _ in range(200):
        n_items = int(rng.integers(2, 15))
        sessions = [list(rng.integers(0, n_items, size=rng.integers(1, 8))) for _ in range(rng.integers(1, 7))]
        sessions[-1] = sessions[-1] or [0]
        g = build_graph(sessions[:-1], sessions[-1])
        counts: dict = {}
        for s in sessions:
            for x, y in zip(s[:-1], s[1:]):
                counts[(int(x), int(y))] = counts.get((int(x), int(y)), 0) + 1
        A_out = np.zeros((g.n, g.n))
        A_in = np.zeros((g.n, g.n))
        for (x, y), c in counts.items():
            A_out[g.node_of[x], g.node_of[y]] += c
            A_in[g.node_of[y], g.node_of[x]] += c
        for M in (A_out, A_in):
            tot = M.sum(axis=1, keepdims=True)
            np.divide(M, tot, out=M, where=tot > 0)
        if not (np.array_equal(g.A_out, A_out) and np.array_equal(g.A_in, A_in)):
            bad += 1
        for M in (g.A_out, g.A_in):
            rs = M.sum(axis=1)
            worst_row = max(worst_row, float(np.abs(rs[rs > 0] - 1).max(initial=0.0)))
    report(2, bad == 0 and worst_row <= 1e-9, f"200 random graphs, {bad} mismatches, worst nonzero row sum deviation {worst_row:.1e} <= 1e-9")


# --------------------------------------------------------- 3 attention


def test_3_attention_readout_oracle():
    rng = np.random.default_rng(3)
    worst, worst_sum = 0.0, 0.0
    for case in range(100):
        p = ParameterSet.initialize(10, 2, d, du, rng=np.random.default_rng(case))
        arr = {k: v.data for k, v in p.items()}
        m, s = int(rng.integers(1, 8)), int(rng.integers(1, 6))
        Hc, F, e = rng.standard_normal((m, d)), rng.standard_normal((s, d)), rng.standard_normal(du)
        S = SessionEmbeddingMatrix(Tensor(F), Tensor(Hc))
        Hh, wts = attention_oracle(Hc, F, arr)
        got_w = attention_weights(S, p).data
        Hp = history_attention(S, p).data
        rep = readout(Tensor(Hp), Tensor(e), p)
        refs = readout_oracle(Hh, e, arr)
        diffs = [np.abs(Hp - Hh).max(), np.abs(got_w - wts).max()]
        diffs += [np.abs(g.data - r).max() for g, r in zip((rep.z_l, rep.z_g, rep.z_d, rep.z_u, rep.alpha), refs)]
        worst = max(worst, *diffs)
        worst_sum = max(worst_sum, float(np.abs(got_w.sum(axis=1) - 1).max()))
    report(3, worst <= 1e-9 and worst_sum <= 1e-6, f"100 random cases, max |module - loop oracle| {worst:.1e} <= 1e-9, attention row sums within {worst_sum:.1e} <= 1e-6")


# ------------------------------------------------------------ 4 ablation


def test_4_ablation_isolation():
    corpus = synthetic.markov_corpus(n_users=8, n_items=30, sessions_per_user=8)
    inst = [x for x in D.make_instances(corpus, 5, 20) if x.history]
    cfg = TrainConfig(d=8, d_user=4, T=2, M=5, precision=64).with_flags(AblationFlags.from_name("-A-P-U"))
    model = build_model(cfg, corpus.n_items, corpus.n_users)
    base = model.scores(inst)
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(3):
        moved = [
            D.TrainingInstance(
                x.user,
                tuple(tuple(int(v) for v in rng.integers(0, 30, size=rng.integers(2, 6))) for _ in range(rng.integers(0, 6))),
                x.prefix,
                x.label,
            )
            for x in inst
        ]
        worst = max(worst, float(np.abs(model.scores(moved) - base).max()))
    report(4, worst <= 1e-9, f"-A-P-U, {len(inst)} instances x 3 history perturbations, max logit change {worst:.1e} <= 1e-9")


# -------------------------------------------------------------- 5 metrics


def test_5_metric_oracle():
    rng = np.random.default_rng(5)
    bad, order_ok = 0, True
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        scores = np.round(rng.standard_normal(n), int(rng.integers(0, 3)))  # rounding creates ties
        label = int(rng.integers(n))
        rank = sorted(range(n), key=lambda i: (-scores[i], i)).index(label) + 1
        got = int(label_ranks(scores[None], [label])[0])
        for K in (1, 5, 10, 20):
            rec, mrr = recall_at_k([got], K), mrr_at_k([got], K)
            if got != rank or rec != float(rank <= K) or mrr != (1.0 / rank if rank <= K else 0.0):
                bad += 1
            order_ok &= mrr <= rec
    report(5, bad == 0 and order_ok, f"1000 random score vectors, {bad} mismatches against full sort, MRR@K <= Recall@K {'holds' if order_ok else 'violated'}")


# --------------------------------------------------------------- 6 overfit


def test_6_overfit():
    corpus = synthetic.markov_corpus()  # 20 users, 50 items
    inst = D.make_instances(corpus, 10, 20)
    cfg = TrainConfig(d=32, d_user=16, T=1, M=10, batch_size=100, lr=0.001, epochs=200, precision=32)
    t0 = time.perf_counter()
    trainer = Trainer(cfg, corpus.n_items, corpus.n_users)
    trainer.fit(inst)
    r1 = recall_at_k(rank_instances(trainer.model, inst), 1)
    elapsed = time.perf_counter() - t0
    report(6, r1 >= 0.95 and elapsed < 600, f"{corpus.n_users} users, {corpus.n_items} items, {len(inst)} instances, 200 epochs: train Recall@1={r1:.3f} >= 0.95 in {elapsed:.0f}s < 600s")


# ------------------------------------------------------- 7 personalisation


def test_7_personalisation():
    corpus = synthetic.cohort_corpus(n_users=120, sessions_per_user=50, session_len=3)
    train, test = D.split_train_test(corpus, 0.8)
    cfg = TrainConfig(d=32, d_user=16, T=1, M=10, batch_size=100, lr=0.001, epochs=30, precision=32, seed=0)
    inst = D.make_instances(train, cfg.M, cfg.max_session_len)
    held = D.make_instances(test, cfg.M, cfg.max_session_len, context=[train])
    recall = {}
    for name in ("full", "-A-P"):
        t = Trainer(cfg.with_flags(AblationFlags.from_name(name)), train.n_items, train.n_users)
        t.fit(inst)
        recall[name] = recall_at_k(rank_instances(t.model, held), 5)
    recall["pop"] = recall_at_k(label_ranks(pop_baseline(train).scores(held), [x.label for x in held]), 5)
    gap_pop = 100 * (recall["full"] - recall["pop"])
    gap_ap = 100 * (recall["full"] - recall["-A-P"])
    report(
        7,
        gap_pop >= 20 and gap_ap >= 5,
        f"held-out Recall@5 full={100 * recall['full']:.1f} pop={100 * recall['pop']:.1f} -A-P={100 * recall['-A-P']:.1f}; "
        f"full-pop={gap_pop:.1f} >= 20, full-(-A-P)={gap_ap:.1f} >= 5 points",
    )


# ------------------------------------------------------------ 8 real data


def _read_reddit(path):
    if not path.endswith(".csv"):
        return D.read_interactions(path)
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(D.Interaction(row["username"], row["subreddit"], int(float(row["utc"]))))
    return out


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get("APGNN_REDDIT_DATA"), reason="set APGNN_REDDIT_DATA to the Reddit interaction file")
def test_8_reddit_directional():
    events = _read_reddit(os.environ["APGNN_REDDIT_DATA"])
    users = sorted({e.user_id for e in events})
    keep = set(np.random.default_rng(8).choice(users, size=max(1, len(users) // 20), replace=False).tolist())
    events = [e for e in events if e.user_id in keep]
    corpus = D.filter_corpus(D.split_sessions(events, 60), 3, 5)
    train, test = D.split_train_test(corpus, 0.8)
    cfg = TrainConfig.preset("reddit", epochs=int(os.environ.get("APGNN_REDDIT_EPOCHS", "5")), precision=32)
    inst = D.make_instances(train, cfg.M, cfg.max_session_len)
    held = D.make_instances(test, cfg.M, cfg.max_session_len, context=[train])
    t = Trainer(cfg, train.n_items, train.n_users)
    t.fit(inst)
    labels = [x.label for x in held]
    r = {
        "a-pgnn": recall_at_k(rank_instances(t.model, held), 5),
        "pop": recall_at_k(label_ranks(pop_baseline(train).scores(held), labels), 5),
        "itemknn": recall_at_k(label_ranks(itemknn_baseline(train).scores(held), labels), 5),
    }
    report(8, r["a-pgnn"] > max(r["pop"], r["itemknn"]), "5% Reddit users, Recall@5 " + " ".join(f"{k}={100 * v:.2f}" for k, v in r.items()))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
