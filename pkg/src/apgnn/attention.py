"""Historical-session pooling, cross-session attention and the readout that
turns current-session states into the unified user vector."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError
from .tensor import Tensor


@dataclass
class SessionEmbeddingMatrix:
    F: Tensor  # (..., S, d) pooled historical sessions
    H_cur: Tensor  # (..., L, d) current prefix states, positional
    hist_valid: np.ndarray | None = None  # (..., S) which history rows are real


@dataclass
class UnifiedRepresentation:
    z_l: Tensor
    z_g: Tensor
    z_d: Tensor
    z_u: Tensor
    alpha: Tensor


def _pad(seqs, width=None):
    width = width or max((len(s) for s in seqs), default=0)
    idx = np.zeros((len(seqs), max(width, 1)), dtype=np.int64)
    mask = np.zeros_like(idx, dtype=bool)
    for i, s in enumerate(seqs):
        idx[i, : len(s)] = s
        mask[i, : len(s)] = True
    return idx, mask


def pool_history(node_states: Tensor, history_seqs, current_seq) -> SessionEmbeddingMatrix:
    """Single-graph convenience wrapper over :func:`pool_history_padded`."""
    if not current_seq:
        raise ContractError("current session must map to at least one node")
    d = node_states.shape[-1]
    h_cur = tn.take_rows(node_states, np.asarray(current_seq, dtype=np.int64))
    if not history_seqs:
        return SessionEmbeddingMatrix(tn.Tensor(np.zeros((0, d)), dtype=node_states.dtype), h_cur, np.zeros(0, dtype=bool))
    if any(len(s) == 0 for s in history_seqs):
        raise ContractError("every historical session must map to at least one node")
    idx, mask = _pad(history_seqs)
    F = tn.max_rows(tn.take_rows(node_states, idx), mask)
    return SessionEmbeddingMatrix(F, h_cur, np.ones(len(history_seqs), dtype=bool))


def pool_history_padded(node_states: Tensor, hist_idx, hist_mask, cur_idx) -> SessionEmbeddingMatrix:
    """Column-wise max over each history session's node states.

    ``hist_idx``/``hist_mask`` are (..., S, Lh); ``cur_idx`` is (..., L).
    """
    F = tn.max_rows(tn.take_rows(node_states, hist_idx), hist_mask)
    return SessionEmbeddingMatrix(F, tn.take_rows(node_states, cur_idx), hist_mask.any(axis=-1))


def attention_weights(S: SessionEmbeddingMatrix, params) -> Tensor:
    d = S.H_cur.shape[-1]
    Q = tn.relu(S.H_cur @ params["W_Q"])
    K = tn.relu(S.F @ params["W_K"])
    logits = (Q @ K.T) * (1.0 / np.sqrt(d))
    mask = None if S.hist_valid is None else S.hist_valid[..., None, :]
    return tn.softmax_rows(logits, mask)


def history_attention(S: SessionEmbeddingMatrix, params, use_attention: bool = True) -> Tensor:
    """``H' = softmax(Q K^T / sqrt(d)) V + H_cur``; ``H_cur`` alone when
    attention is ablated or there is no history."""
    if not use_attention or S.F.shape[-2] == 0:
        return S.H_cur
    V = tn.relu(S.F @ params["W_V"])
    return attention_weights(S, params) @ V + S.H_cur


def readout(Hp: Tensor, e_u: Tensor | None, params, last=None, cur_mask=None) -> UnifiedRepresentation:
    """Local/global/dynamic/unified representations from ``Hp`` (..., m, d).

    For padded batches ``last`` gives the index of each row's final valid
    position and ``cur_mask`` marks valid positions; unbatched input uses the
    last row.  ``e_u=None`` leaves the user embedding out of the fusion.
    """
    *lead, m, d = Hp.shape
    if m == 0:
        raise ContractError("readout needs a nonempty current session")
    lead = tuple(lead)
    if last is None:
        last = np.full(lead, m - 1, dtype=np.int64)
    last = np.asarray(last, dtype=np.int64)
    z_l = tn.take_rows(Hp, last[..., None]).reshape(lead + (d,))
    pre = (z_l @ params["W_1"].T).reshape(lead + (1, d)) + Hp @ params["W_2"].T + params["b_c"]
    alpha = tn.sigmoid(pre) @ params["W_0"]
    if cur_mask is not None:
        alpha = alpha * np.asarray(cur_mask, dtype=Hp.dtype)
    z_g = (alpha.reshape(lead + (1, m)) @ Hp).reshape(lead + (d,))
    z_d = tn.concat([z_g, z_l])
    fused = z_d if e_u is None else tn.concat([z_d, e_u])
    z_u = fused @ params["B"].T
    return UnifiedRepresentation(z_l, z_g, z_d, z_u, alpha)
