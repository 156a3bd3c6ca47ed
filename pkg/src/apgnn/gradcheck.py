"""Central finite-difference checks of the end-to-end gradients."""
from __future__ import annotations

import contextlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import pgnn
from . import tensor as tn
from .data import SessionCorpus, make_instances
from .model import APGNN, collate
from .pgnn import AblationFlags, ParameterSet
from .trainer import loss

MICRO = dict(n_items=20, n_users=3, d=6, d_user=4, T=2, max_session_len=4, M=2)


@dataclass
class ParamCheck:
    name: str
    rel_err: float
    max_abs_err: float
    ok: bool


@dataclass
class GradcheckReport:
    seed: int
    tol: float
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def worst(self) -> ParamCheck:
        return max(self.checks, key=lambda c: c.rel_err)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            out.append(f"seed={self.seed} {c.name:<9s} rel_err={c.rel_err:.3e} max_abs={c.max_abs_err:.3e} {'PASS' if c.ok else 'FAIL'}")
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)`` over a whole tensor."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


@contextlib.contextmanager
def injected(fault: str | None):
    if fault is None:
        yield
        return
    pgnn.FAULTS.add(fault)
    try:
        yield
    finally:
        pgnn.FAULTS.discard(fault)


def micro_corpus(seed: int, n_items=20, n_users=3, sessions=(3, 4), length=(2, 5)) -> SessionCorpus:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_users):
        user = []
        for _ in range(int(rng.integers(sessions[0], sessions[1] + 1))):
            s = [int(rng.integers(n_items))]
            while len(s) < int(rng.integers(length[0], length[1] + 1)):
                v = int(rng.integers(n_items))
                if v != s[-1]:
                    s.append(v)
            user.append(s)
        out.append(user)
    return SessionCorpus([f"u{u}" for u in range(n_users)], [f"i{v}" for v in range(n_items)], out)


def check_model(
    model: APGNN,
    instances,
    h: float = 1e-5,
    tol: float = 1e-3,
    training: bool = True,
    reference: APGNN | None = None,
) -> list[ParamCheck]:
    """Compare ``model``'s backward pass with central differences.

    The differences are taken on ``reference`` when given (a 64-bit copy of
    a 32-bit model: float32 forward passes cannot resolve the smallest
    gradients by differencing), else on ``model`` itself.
    """
    ref = model if reference is None else reference
    ref_batch = collate(instances, dtype=ref.params["E_v"].dtype)
    running = ref.bn_running

    def objective() -> float:
        if running is not None:
            ref.bn_running = {k: v.copy() for k, v in running.items()}
        with tn.no_grad(), tn.precision(8 * ref.params["E_v"].dtype.itemsize):
            return float(loss(ref.forward(ref_batch, training=training), ref_batch.labels).data)

    batch = collate(instances, dtype=model.params["E_v"].dtype)
    saved = None if model.bn_running is None else {k: v.copy() for k, v in model.bn_running.items()}
    model.params.zero_grad()
    L = loss(model.forward(batch, training=training), batch.labels)
    tn.backward(L)
    model.bn_running = saved
    checks = []
    for name, p in model.params.items():
        num = numeric_grad(objective, ref.params[name].data, h)
        ana = p.grad.astype(np.float64)
        err = relative_error(ana, num)
        checks.append(ParamCheck(name, err, float(np.abs(ana - num).max()), err <= tol))
    model.params.zero_grad()
    ref.bn_running = running
    return checks


def run_micro(
    seed: int = 0,
    precision: int = 64,
    flags: AblationFlags = AblationFlags(),
    batch_norm: bool = False,
    fault: str | None = None,
    T: int | None = None,
    h: float = 1e-5,
    bias: bool = False,
) -> GradcheckReport:
    """Gradient check of the whole model at micro scale for one seed."""
    tol = 1e-3
    if precision == 32:
        warnings.warn("32-bit gradient check: tolerance loosened to 1e-2 (reference differences taken in 64-bit)", stacklevel=2)
        tol = 1e-2
    cfg = MICRO
    T = cfg["T"] if T is None else T
    corpus = micro_corpus(seed, cfg["n_items"], cfg["n_users"])
    instances = make_instances(corpus, cfg["M"], cfg["max_session_len"])

    def build(bits):
        with tn.precision(bits):
            rng = np.random.default_rng(10_000 + seed)
            params = ParameterSet.initialize(cfg["n_items"], cfg["n_users"], cfg["d"], cfg["d_user"], flags, batch_norm, rng=rng, bias=bias)
            return APGNN(params, cfg["d"], T, flags, batch_norm)

    with injected(fault):
        ref = build(64)
        if precision == 64:
            with tn.precision(64):
                checks = check_model(ref, instances, h=h, tol=tol)
        else:
            model = build(32)
            for k, p in model.params.items():
                p.data[...] = ref.params[k].data
            with tn.precision(32):
                checks = check_model(model, instances, h=h, tol=tol, reference=ref)
    return GradcheckReport(seed, tol, checks)
