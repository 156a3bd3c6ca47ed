"""User-conditioned gated graph propagation.

All functions accept either a single graph (``H`` is n x d) or a padded
batch (``H`` is B x n x d with matching leading axes everywhere else).
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class AblationFlags:
    use_user_embed: bool = True
    use_history_attention: bool = True
    use_pgnn: bool = True

    @classmethod
    def from_name(cls, name: str) -> "AblationFlags":
        """``full``, or any of ``-U``, ``-A``, ``-P`` combined (``-A-P``).

        The long forms ``no-user``, ``no-attention`` and ``no-pgnn`` are also
        accepted, comma-separated when combined.
        """
        name = name.strip()
        long = {"no-user": "-U", "no-attention": "-A", "no-pgnn": "-P"}
        if any(k in name for k in long):
            parts = [p.strip() for p in name.split(",") if p.strip()]
            if not all(p in long for p in parts):
                raise ValueError(f"unknown ablation {name!r}")
            name = "".join(long[p] for p in parts)
        if name in ("full", "", "A-PGNN"):
            return cls()
        parts = [p for p in name.replace("A-PGNN", "").replace("(", "").replace(")", "").split("-") if p]
        unknown = set(parts) - {"U", "A", "P"}
        if unknown:
            raise ValueError(f"unknown ablation {name!r}")
        return cls("U" not in parts, "A" not in parts, "P" not in parts)

    @property
    def name(self) -> str:
        tags = [t for t, on in (("U", self.use_user_embed), ("A", self.use_history_attention), ("P", self.use_pgnn)) if not on]
        return "full" if not tags else "".join("-" + t for t in tags)


class ParameterSet(OrderedDict):
    """Name -> Tensor for every learnable array of the model.

    Only tensors the chosen ablation actually uses are created, so every
    member receives a gradient on each backward pass.
    """

    @classmethod
    def initialize(cls, n_items, n_users, d, d_user, flags=AblationFlags(), batch_norm=False, rng=None, dtype=None, bias=False):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = dtype or tn.get_dtype()
        shapes = cls.shapes(n_items, n_users, d, d_user, flags, bias)
        bound = 1.0 / np.sqrt(d)
        ps = cls()
        for name, shape in shapes.items():
            ps[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name, dtype=dtype)
        if batch_norm:
            ps["bn_gamma"] = Tensor(np.ones(d), requires_grad=True, name="bn_gamma", dtype=dtype)
            ps["bn_beta"] = Tensor(np.zeros(d), requires_grad=True, name="bn_beta", dtype=dtype)
        return ps

    @staticmethod
    def shapes(n_items, n_users, d, d_user, flags=AblationFlags(), bias=False) -> dict[str, tuple[int, ...]]:
        du = d_user if flags.use_user_embed else 0
        s: dict[str, tuple[int, ...]] = {"E_v": (n_items, d)}
        if flags.use_user_embed:
            s["E_u"] = (n_users, d_user)
        if flags.use_pgnn:
            s.update(W_out=(d + du, d), W_in=(d + du, d))
            s.update(W_z=(d, 2 * d), W_r=(d, 2 * d), W_o=(d, 2 * d))
            s.update(U_z=(d, d), U_r=(d, d), U_o=(d, d))
            if bias:  # opt-in, off by default
                s.update(b_out=(d,), b_in=(d,), b_z=(d,), b_r=(d,), b_o=(d,))
        if flags.use_history_attention:
            s.update(W_Q=(d, d), W_K=(d, d), W_V=(d, d))
        s.update(W_0=(d,), W_1=(d, d), W_2=(d, d), b_c=(d,), B=(d, 2 * d + du))
        return s

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None


# fault injection for the gradient-check mutation test
FAULTS: set[str] = set()


def _sign_flipped_tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        return (-g * (1.0 - y * y),)

    return tn._result(y, (x,), "tanh", bw)


def aggregate(A_out, A_in, H: Tensor, e_u: Tensor | None, params) -> Tensor:
    """Row i is ``a_out_i || a_in_i`` with ``a_* = A_* [H || e_u] W_*``.

    Pass ``e_u=None`` to drop the user embedding from the messages.
    """
    A_out = tn.as_tensor(A_out, like=H)
    A_in = tn.as_tensor(A_in, like=H)
    n = H.shape[-2]
    if A_out.shape[-2:] != (n, n) or A_in.shape[-2:] != (n, n):
        raise ShapeError(f"aggregate: adjacency {A_out.shape}/{A_in.shape} vs states {H.shape}")
    x = H if e_u is None else tn.concat([H, tn.repeat_rows(e_u, n)])
    if x.shape[-1] != params["W_out"].shape[0]:
        raise ShapeError(f"aggregate: message width {x.shape[-1]} vs W_out {params['W_out'].shape}")
    a_out = A_out @ (x @ params["W_out"])
    a_in = A_in @ (x @ params["W_in"])
    if "b_out" in params:
        a_out = a_out + params["b_out"]
        a_in = a_in + params["b_in"]
    return tn.concat([a_out, a_in])


def _plus_bias(x: Tensor, params, name: str) -> Tensor:
    return x + params[name] if name in params else x


def gru_update(H: Tensor, agg: Tensor, params) -> Tensor:
    z = tn.sigmoid(_plus_bias(agg @ params["W_z"].T + H @ params["U_z"].T, params, "b_z"))
    r = tn.sigmoid(_plus_bias(agg @ params["W_r"].T + H @ params["U_r"].T, params, "b_r"))
    pre = _plus_bias(agg @ params["W_o"].T + (r * H) @ params["U_o"].T, params, "b_o")
    cand = _sign_flipped_tanh(pre) if "gru-candidate-sign" in FAULTS else tn.tanh(pre)
    return (1.0 - z) * H + z * cand


def propagate(items, A_out, A_in, e_u: Tensor | None, T: int, params, flags: AblationFlags = AblationFlags()) -> Tensor:
    """Run ``T`` aggregate + GRU steps starting from the item embeddings.

    ``items`` holds the item index of every node (n, or B x n when batched).
    """
    H = tn.embedding(params["E_v"], items)
    if not flags.use_pgnn:
        return H
    e = e_u if flags.use_user_embed else None
    for _ in range(T):
        H = gru_update(H, aggregate(A_out, A_in, H, e, params), params)
    return H
