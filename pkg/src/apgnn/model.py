"""The full scorer: graph -> PGNN -> pooling/attention -> readout -> scores.

Instances in a batch are padded to common sizes.  Padded nodes have zero
adjacency, padded history rows are masked out of the softmax, and padded
prefix positions are masked out of the readout, so every row of the batch
computes exactly its own per-instance result.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .attention import history_attention, pool_history_padded, readout
from .data import TrainingInstance
from .graph import BehaviorGraph, build_graph
from .pgnn import AblationFlags, ParameterSet, propagate
from .tensor import Tensor


@dataclass
class Batch:
    users: np.ndarray  # (B,)
    labels: np.ndarray  # (B,)
    items: np.ndarray  # (B, N) item index per node
    A_out: np.ndarray  # (B, N, N)
    A_in: np.ndarray
    hist_idx: np.ndarray  # (B, S, Lh) node positions
    hist_mask: np.ndarray
    cur_idx: np.ndarray  # (B, L)
    cur_mask: np.ndarray
    last: np.ndarray  # (B,) index of the final prefix position

    def __len__(self) -> int:
        return self.users.shape[0]


def graph_for(inst: TrainingInstance) -> BehaviorGraph:
    return build_graph(inst.history, inst.prefix)


def collate(instances: Sequence[TrainingInstance], graphs: Sequence[BehaviorGraph] | None = None, dtype=None) -> Batch:
    graphs = graphs if graphs is not None else [graph_for(x) for x in instances]
    dtype = dtype or tn.get_dtype()
    B = len(instances)
    N = max(g.n for g in graphs)
    S = max(max(len(g.history_seqs) for g in graphs), 1)
    Lh = max(max((len(s) for g in graphs for s in g.history_seqs), default=1), 1)
    L = max(len(g.current_seq) for g in graphs)
    items = np.zeros((B, N), dtype=np.int64)
    A_out = np.zeros((B, N, N), dtype=dtype)
    A_in = np.zeros((B, N, N), dtype=dtype)
    hist_idx = np.zeros((B, S, Lh), dtype=np.int64)
    hist_mask = np.zeros((B, S, Lh), dtype=bool)
    cur_idx = np.zeros((B, L), dtype=np.int64)
    cur_mask = np.zeros((B, L), dtype=bool)
    last = np.zeros(B, dtype=np.int64)
    for b, g in enumerate(graphs):
        n = g.n
        items[b, :n] = g.nodes
        A_out[b, :n, :n] = g.A_out
        A_in[b, :n, :n] = g.A_in
        for s, seq in enumerate(g.history_seqs):
            hist_idx[b, s, : len(seq)] = seq
            hist_mask[b, s, : len(seq)] = True
        m = len(g.current_seq)
        cur_idx[b, :m] = g.current_seq
        cur_mask[b, :m] = True
        last[b] = m - 1
    return Batch(
        users=np.fromiter((x.user for x in instances), dtype=np.int64, count=B),
        labels=np.fromiter((x.label for x in instances), dtype=np.int64, count=B),
        items=items,
        A_out=A_out,
        A_in=A_in,
        hist_idx=hist_idx,
        hist_mask=hist_mask,
        cur_idx=cur_idx,
        cur_mask=cur_mask,
        last=last,
    )


def score_items(z_u: Tensor, E_v: Tensor) -> Tensor:
    """``z_u^T e_v`` for every item; z_u is (d,) or (B, d)."""
    return z_u @ E_v.T


class APGNN:
    def __init__(self, params: ParameterSet, d: int, T: int, flags: AblationFlags = AblationFlags(), batch_norm: bool = False):
        self.params = params
        self.d = d
        self.T = T
        self.flags = flags
        self.batch_norm = batch_norm
        dtype = params["E_v"].dtype
        self.bn_running = {"mean": np.zeros(d, dtype=dtype), "var": np.ones(d, dtype=dtype)} if batch_norm else None

    @property
    def n_items(self) -> int:
        return self.params["E_v"].shape[0]

    def user_vectors(self, users) -> Tensor | None:
        if not self.flags.use_user_embed:
            return None
        return tn.embedding(self.params["E_u"], users)

    def representation(self, batch: Batch, training: bool = False):
        p = self.params
        e_u = self.user_vectors(batch.users)
        H = propagate(batch.items, batch.A_out, batch.A_in, e_u, self.T, p, self.flags)
        S = pool_history_padded(H, batch.hist_idx, batch.hist_mask, batch.cur_idx)
        Hp = history_attention(S, p, self.flags.use_history_attention)
        if self.batch_norm:
            Hp = tn.batch_norm(Hp, p["bn_gamma"], p["bn_beta"], batch.cur_mask, self.bn_running, training=training)
        return readout(Hp, e_u, p, last=batch.last, cur_mask=batch.cur_mask)

    def forward(self, batch: Batch, training: bool = False) -> Tensor:
        """Scores (B, |V|) for every item."""
        rep = self.representation(batch, training)
        return score_items(rep.z_u, self.params["E_v"])

    def scores(self, instances: Sequence[TrainingInstance], batch_size: int = 256) -> np.ndarray:
        """Evaluation-mode scores without recording a tape."""
        out = []
        with tn.no_grad():
            for i in range(0, len(instances), batch_size):
                chunk = instances[i : i + batch_size]
                out.append(self.forward(collate(chunk, dtype=self.params["E_v"].dtype)).data)
        if not out:
            return np.zeros((0, self.n_items), dtype=self.params["E_v"].dtype)
        return np.concatenate(out, axis=0)
