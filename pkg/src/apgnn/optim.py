from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class Adam:
    """Adam with bias-corrected moments, keyed by parameter name.

    ``weight_decay`` adds ``weight_decay * w`` to each gradient (plain L2).
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 0.001,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractError(f"adam step: no gradient for {', '.join(missing)}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m/{k}"] = self.m[k]
            out[f"adam.v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        for k, p in self.params.items():
            self.m[k] = np.array(arrays[f"adam.m/{k}"], dtype=p.dtype).reshape(p.shape)
            self.v[k] = np.array(arrays[f"adam.v/{k}"], dtype=p.dtype).reshape(p.shape)
        self.t = t


def adam_step(params: Mapping[str, Tensor], lr: float = 0.001, betas=(0.9, 0.999), eps: float = 1e-8, state: Adam | None = None) -> Adam:
    """One Adam update; pass the returned optimizer back in as ``state`` to continue."""
    opt = state if state is not None else Adam(params, lr=lr, betas=betas, eps=eps)
    opt.lr, (opt.beta1, opt.beta2), opt.eps = lr, betas, eps
    opt.step()
    return opt
