"""Ranking metrics, POP / Item-KNN baselines and bucketed reports."""
from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from . import _accel
from .data import SessionCorpus, TrainingInstance
from .errors import ContractError


@dataclass
class RankedResult:
    instance: int
    rank: int  # 1-based; ties broken by ascending item index
    topk: dict[int, list[int]] = field(default_factory=dict)


def label_ranks(scores: np.ndarray, labels) -> np.ndarray:
    scores = np.ascontiguousarray(scores)
    return _accel.label_ranks(scores, np.asarray(labels, dtype=np.int64))


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best items per row, same tie rule as the ranks."""
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def ranked_results(scores: np.ndarray, labels, ks: Sequence[int] = ()) -> list[RankedResult]:
    ranks = label_ranks(scores, labels)
    tops = top_k(scores, max(ks)) if ks else None
    return [
        RankedResult(i, int(r), {k: tops[i, :k].tolist() for k in ks} if ks else {})
        for i, r in enumerate(ranks)
    ]


def _ranks(results) -> np.ndarray:
    if isinstance(results, np.ndarray):
        r = results
    else:
        r = np.array([x.rank if isinstance(x, RankedResult) else x for x in results], dtype=np.int64)
    if r.size == 0:
        raise ContractError("metrics need at least one result")
    return r


def recall_at_k(results, K: int) -> float:
    if K < 1:
        raise ContractError(f"K must be >= 1, got {K}")
    r = _ranks(results)
    return float(np.mean(r <= K))


def mrr_at_k(results, K: int) -> float:
    if K < 1:
        raise ContractError(f"K must be >= 1, got {K}")
    r = _ranks(results)
    return float(np.mean(np.where(r <= K, 1.0 / r, 0.0)))


# ----------------------------------------------------------------- baselines


class PopScorer:
    """Static score = how often the item occurs in the training sessions."""

    def __init__(self, train: SessionCorpus):
        counts = Counter(v for ss in train.sessions for s in ss for v in s)
        self.freq = np.zeros(train.n_items)
        for v, n in counts.items():
            self.freq[v] = n

    def scores(self, instances: Sequence[TrainingInstance]) -> np.ndarray:
        return np.tile(self.freq, (len(instances), 1))


def pop_baseline(train: SessionCorpus) -> PopScorer:
    return PopScorer(train)


class ItemKNNScorer:
    """Cosine similarity of binary session-incidence vectors.

    A candidate's score is its similarity to the last item of the prefix;
    the last item itself is not recommended (consecutive repeats cannot
    occur in cleaned sessions).
    """

    def __init__(self, train: SessionCorpus):
        rows, cols = [], []
        r = 0
        for ss in train.sessions:
            for s in ss:
                for v in set(s):
                    rows.append(r)
                    cols.append(v)
                r += 1
        X = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(r, train.n_items))
        co = (X.T @ X).tocsr()
        n = np.sqrt(co.diagonal())
        inv = np.divide(1.0, n, out=np.zeros_like(n), where=n > 0)
        self.sim = sp.diags(inv) @ co @ sp.diags(inv)
        self.sim = self.sim.tocsr()

    def similarity(self, i: int, j: int) -> float:
        return float(self.sim[i, j])

    def scores(self, instances: Sequence[TrainingInstance]) -> np.ndarray:
        last = np.array([x.prefix[-1] for x in instances], dtype=np.int64)
        out = self.sim[last].toarray()
        out[np.arange(len(last)), last] = 0.0
        return out


def itemknn_baseline(train: SessionCorpus) -> ItemKNNScorer:
    return ItemKNNScorer(train)


# ----------------------------------------------------------------- breakdown


def _bucket_keys(instances: Sequence[TrainingInstance], by: str, width: int) -> list[str]:
    if by == "prefix_length":
        return [str(len(x.prefix)) for x in instances]
    if by == "history_count":
        return [str(x.n_prior) for x in instances]
    if by == "history_group_width":
        keys = []
        for x in instances:
            lo = (x.n_prior // width) * width
            keys.append(f"[{lo or 1},{lo + width})")  # at least one prior session
        return keys
    raise ContractError(f"unknown breakdown {by!r}")


def _sort_key(k: str):
    return int(k.strip("[").split(",")[0]) if k != "all" else -1


def breakdown(
    runs: np.ndarray | Sequence[np.ndarray],
    instances: Sequence[TrainingInstance],
    by: str,
    ks: Iterable[int] = (5, 10, 20),
    width: int = 10,
) -> list[dict]:
    """Per-bucket Recall@K / MRR@K.

    ``runs`` is one rank array or a list of them (one per seed, aligned with
    ``instances``); with several runs each row carries the mean and the
    standard deviation across runs.
    """
    runs = [np.asarray(runs)] if isinstance(runs, np.ndarray) or np.isscalar(runs[0]) else [np.asarray(r) for r in runs]
    keys = np.array(_bucket_keys(instances, by, width))
    rows = []
    for key in sorted(set(keys.tolist()), key=_sort_key):
        sel = keys == key
        for K in ks:
            for metric, fn in (("recall", recall_at_k), ("mrr", mrr_at_k)):
                vals = [fn(r[sel], K) for r in runs]
                rows.append(
                    {
                        "metric": metric,
                        "K": K,
                        "bucket": key,
                        "value": float(np.mean(vals)),
                        "std": float(np.std(vals)) if len(vals) > 1 else 0.0,
                        "count": int(sel.sum()),
                    }
                )
    return rows


def summary_rows(ranks: np.ndarray, ks: Iterable[int] = (5, 10, 20), bucket: str = "all") -> list[dict]:
    rows = []
    for K in ks:
        rows.append({"metric": "recall", "K": K, "bucket": bucket, "value": recall_at_k(ranks, K), "count": int(ranks.size)})
        rows.append({"metric": "mrr", "K": K, "bucket": bucket, "value": mrr_at_k(ranks, K), "count": int(ranks.size)})
    return rows


def to_csv(rows: Sequence[dict], with_std: bool = False) -> str:
    cols = ["metric", "K", "bucket", "value", "count"] + (["std"] if with_std else [])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "value": f"{r['value']:.6f}", **({"std": f"{r.get('std', 0.0):.6f}"} if with_std else {})})
    return buf.getvalue()


def format_summary(rows: Sequence[dict], title: str = "") -> str:
    lines = [title] if title else []
    for r in rows:
        if r["bucket"] == "all":
            label = f"{'Recall' if r['metric'] == 'recall' else 'MRR'}@{r['K']}"
            lines.append(f"  {label:<10s} {100 * r['value']:7.2f}   (n={r['count']})")
    lines.append("  ranks: ties broken by ascending item index")
    return "\n".join(lines)
