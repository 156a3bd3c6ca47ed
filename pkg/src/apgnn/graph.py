"""Per-user behaviour graph with normalised outgoing/incoming adjacency."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _accel
from .errors import ContractError


@dataclass(frozen=True)
class BehaviorGraph:
    nodes: tuple[int, ...]
    node_of: dict
    A_out: np.ndarray
    A_in: np.ndarray
    session_node_seqs: tuple[tuple[int, ...], ...]  # history sessions first, current prefix last
    counts: np.ndarray  # raw Count(v_i, v_j), kept for inspection

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def history_seqs(self) -> tuple[tuple[int, ...], ...]:
        return self.session_node_seqs[:-1]

    @property
    def current_seq(self) -> tuple[int, ...]:
        return self.session_node_seqs[-1]


def _row_normalise(counts: np.ndarray) -> np.ndarray:
    tot = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, tot, out=np.zeros(counts.shape, dtype=np.float64), where=tot > 0)


def build_graph(history: Sequence[Sequence[int]], current_prefix: Sequence[int]) -> BehaviorGraph:
    """Nodes in order of first appearance over (history..., prefix).

    Transitions are counted only between adjacent items of the same session.
    ``A_out[i, j] = Count(i, j) / sum_k Count(i, k)`` and
    ``A_in[i, j] = Count(j, i) / sum_k Count(k, i)``; rows without any
    transitions stay zero.
    """
    sessions = [tuple(s) for s in history] + [tuple(current_prefix)]
    if not any(sessions):
        raise ContractError("build_graph needs at least one nonempty session")
    node_of: dict = {}
    seqs = []
    for s in sessions:
        seqs.append(tuple(node_of.setdefault(v, len(node_of)) for v in s))
    n = len(node_of)
    flat = np.fromiter((p for s in seqs for p in s), dtype=np.int64)
    offsets = np.zeros(len(seqs) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(s) for s in seqs])
    counts = _accel.count_transitions(flat, offsets, n)
    return BehaviorGraph(
        nodes=tuple(node_of),
        node_of=node_of,
        A_out=_row_normalise(counts),
        A_in=_row_normalise(counts.T),
        session_node_seqs=tuple(seqs),
        counts=counts,
    )


def edge_list(g: BehaviorGraph) -> str:
    """Debug dump, one ``i j w_out w_in`` line per pair with any weight.

    ``i`` and ``j`` are item indices; the weights are ``A_out[i, j]`` and
    ``A_in[i, j]``.
    """
    lines = []
    nz = np.argwhere((g.A_out > 0) | (g.A_in > 0))
    for i, j in nz:
        lines.append(f"{g.nodes[i]} {g.nodes[j]} {g.A_out[i, j]:.6g} {g.A_in[i, j]:.6g}")
    return "\n".join(lines) + ("\n" if lines else "")
