"""Loss, minibatch training and checkpoints."""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _accel
from . import tensor as tn
from .data import SessionCorpus, TrainingInstance, make_instances
from .errors import ContractError, DataError, NumericError
from .model import APGNN, collate, graph_for
from .optim import Adam
from .pgnn import AblationFlags, ParameterSet
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    d: int = 100
    d_user: int = 50
    T: int = 1
    M: int = 50
    max_session_len: int = 20
    lr: float = 0.001
    l2: float = 0.0
    batch_size: int = 100
    epochs: int = 10
    use_user_embed: bool = True
    use_history_attention: bool = True
    use_pgnn: bool = True
    batch_norm: bool = False
    bias: bool = False
    seed: int = 0
    precision: int = 32

    # unannotated, so a class attribute rather than a field
    PRESETS = {
        "xing": dict(d=100, d_user=50, T=1, M=50, batch_norm=True),
        "reddit": dict(d=50, d_user=50, T=3, M=30, batch_norm=False),
    }

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        try:
            base = dict(cls.PRESETS[name.lower()])
        except KeyError:
            raise ContractError(f"unknown preset {name!r}; choose from {sorted(cls.PRESETS)}") from None
        base.update(overrides)
        return cls(**base)

    @property
    def flags(self) -> AblationFlags:
        return AblationFlags(self.use_user_embed, self.use_history_attention, self.use_pgnn)

    def with_flags(self, flags: AblationFlags) -> "TrainConfig":
        return dataclasses.replace(
            self,
            use_user_embed=flags.use_user_embed,
            use_history_attention=flags.use_history_attention,
            use_pgnn=flags.use_pgnn,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


def make_rng(seed: int, name: str) -> np.random.Generator:
    """Independent named stream derived from one seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


def loss(scores: Tensor, labels) -> Tensor:
    """Batch mean of ``-sum_i [y_i log p_i + (1 - y_i) log(1 - p_i)]`` with
    ``p = softmax(scores)`` and one-hot ``y``; logs are clamped at 1e-12."""
    single = scores.ndim == 1
    if single:
        scores = scores.reshape(1, scores.shape[0])
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, V = scores.shape
    if labels.shape != (B,) or labels.min() < 0 or labels.max() >= V:
        raise ContractError(f"labels {labels.tolist()[:8]} out of range for {V} items / batch {B}")
    y = np.zeros((B, V), dtype=scores.dtype)
    y[np.arange(B), labels] = 1.0
    p = tn.softmax_rows(scores)
    ll = y * tn.log(p) + (1.0 - y) * tn.log(1.0 - p)
    return ll.sum() * (-1.0 / B)


def build_model(config: TrainConfig, n_items: int, n_users: int) -> APGNN:
    dtype = np.float64 if config.precision == 64 else np.float32
    params = ParameterSet.initialize(
        n_items, n_users, config.d, config.d_user, config.flags, config.batch_norm, rng=make_rng(config.seed, "init"), dtype=dtype,
        bias=config.bias,
    )
    return APGNN(params, config.d, config.T, config.flags, config.batch_norm)


@dataclass
class Checkpoint:
    config: TrainConfig
    n_items: int
    n_users: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    bn_running: dict[str, np.ndarray] | None = None
    history: list[dict] = field(default_factory=list)
    vocab_fingerprint: int = 0

    def model(self) -> APGNN:
        dtype = np.float64 if self.config.precision == 64 else np.float32
        ps = ParameterSet()
        for k, v in self.params.items():
            ps[k] = Tensor(v.copy(), requires_grad=True, name=k, dtype=dtype)
        m = APGNN(ps, self.config.d, self.config.T, self.config.flags, self.config.batch_norm)
        if self.bn_running is not None:
            m.bn_running = {k: v.astype(dtype, copy=True) for k, v in self.bn_running.items()}
        return m


def vocab_fingerprint(items: Sequence[str]) -> int:
    return zlib.crc32("\x1f".join(items).encode("utf-8"))


def _batches(n: int, batch_size: int, sizes: np.ndarray, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches; within windows of 20 batches, instances are sorted by
    graph size so padding stays small."""
    perm = rng.permutation(n)
    window = batch_size * 20
    out = []
    for s in range(0, n, window):
        chunk = perm[s : s + window]
        chunk = chunk[np.argsort(sizes[chunk], kind="stable")]
        out.extend(chunk[i : i + batch_size] for i in range(0, len(chunk), batch_size))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


class Trainer:
    def __init__(self, config: TrainConfig, n_items: int, n_users: int, model: APGNN | None = None):
        self.config = config
        self.n_items = n_items
        self.n_users = n_users
        tn.set_precision(config.precision)
        self.model = model or build_model(config, n_items, n_users)
        self.opt = Adam(self.model.params, lr=config.lr, weight_decay=config.l2)
        self.rng = make_rng(config.seed, "shuffle")
        self.epoch = 0
        self.history: list[dict] = []

    def train_step(self, instances: Sequence[TrainingInstance], graphs=None) -> float:
        batch = collate(instances, graphs, dtype=self.model.params["E_v"].dtype)
        try:
            try:
                scores = self.model.forward(batch, training=True)
                L = loss(scores, batch.labels)
            except NumericError as exc:
                where = tn.first_nonfinite() or "unknown"
                raise NumericError(f"{exc} at epoch {self.epoch + 1}; first non-finite tensor: {where}") from exc
            if not np.isfinite(L.data).all():
                where = tn.first_nonfinite() or "loss"
                raise NumericError(f"non-finite loss at epoch {self.epoch + 1}; first non-finite tensor: {where}")
            tn.backward(L)
        finally:
            tn.clear_tape()
        self.opt.step()
        return float(L.data)

    def fit(
        self,
        instances: Sequence[TrainingInstance],
        epochs: int | None = None,
        valid: Sequence[TrainingInstance] | None = None,
        callback: Callable[[dict], None] | None = None,
    ) -> list[dict]:
        if not instances:
            raise DataError("no training instances")
        epochs = self.config.epochs if epochs is None else epochs
        graphs = [graph_for(x) for x in instances]
        sizes = np.array([g.n for g in graphs])
        for _ in range(epochs):
            total = 0.0
            for idx in _batches(len(instances), self.config.batch_size, sizes, self.rng):
                total += self.train_step([instances[i] for i in idx], [graphs[i] for i in idx]) * len(idx)
            self.epoch += 1
            rec = {"epoch": self.epoch, "train_loss": total / len(instances)}
            if valid:
                ranks = rank_instances(self.model, valid)
                rec["valid_recall@5"] = float(np.mean(ranks <= 5))
            self.history.append(rec)
            log.info("epoch %d loss %.6f%s", self.epoch, rec["train_loss"], f" valid R@5 {rec['valid_recall@5']:.4f}" if valid else "")
            if callback:
                callback(rec)
        return self.history

    def checkpoint(self, vocab_fp: int = 0) -> Checkpoint:
        return Checkpoint(
            config=self.config,
            n_items=self.n_items,
            n_users=self.n_users,
            params={k: v.data.copy() for k, v in self.model.params.items()},
            adam_m={k: v.copy() for k, v in self.opt.m.items()},
            adam_v={k: v.copy() for k, v in self.opt.v.items()},
            adam_t=self.opt.t,
            epoch=self.epoch,
            rng_state=self.rng.bit_generator.state,
            bn_running=None if self.model.bn_running is None else {k: v.copy() for k, v in self.model.bn_running.items()},
            history=list(self.history),
            vocab_fingerprint=vocab_fp,
        )

    @classmethod
    def resume(cls, ck: Checkpoint) -> "Trainer":
        t = cls(ck.config, ck.n_items, ck.n_users, model=ck.model())
        t.opt.load_state_arrays({**{f"adam.m/{k}": v for k, v in ck.adam_m.items()}, **{f"adam.v/{k}": v for k, v in ck.adam_v.items()}}, ck.adam_t)
        if ck.rng_state is not None:
            t.rng.bit_generator.state = ck.rng_state
        t.epoch = ck.epoch
        t.history = list(ck.history)
        return t


def rank_instances(model: APGNN, instances: Sequence[TrainingInstance], batch_size: int = 256) -> np.ndarray:
    """1-based rank of every label among all items (ties -> lower index first)."""
    ranks = []
    for i in range(0, len(instances), batch_size):
        chunk = instances[i : i + batch_size]
        s = np.ascontiguousarray(model.scores(chunk, batch_size))
        labels = np.fromiter((x.label for x in chunk), dtype=np.int64, count=len(chunk))
        ranks.append(_accel.label_ranks(s, labels))
    return np.concatenate(ranks) if ranks else np.zeros(0, dtype=np.int64)


def train(
    config: TrainConfig,
    corpus: SessionCorpus,
    valid: SessionCorpus | None = None,
    callback: Callable[[dict], None] | None = None,
) -> Checkpoint:
    instances = make_instances(corpus, config.M, config.max_session_len)
    if not instances:
        raise DataError("corpus yields no training instances")
    valid_inst = make_instances(valid, config.M, config.max_session_len, context=[corpus]) if valid is not None else None
    t = Trainer(config, corpus.n_items, corpus.n_users)
    t.fit(instances, valid=valid_inst, callback=callback)
    return t.checkpoint(vocab_fingerprint(corpus.items))


# ----------------------------------------------------------- checkpoint file
#
# Little-endian throughout:
#   8s   magic b"APGNNCK\0"
#   u32  format version (1)
#   u32  length of the JSON header, then the header bytes (UTF-8): config,
#        n_items, n_users, epoch, adam_t, rng_state, history, vocab_fingerprint
#   u32  number of tensors, then per tensor:
#        u16 name length, name (UTF-8), u8 dtype (0 = float32, 1 = float64),
#        u8 ndim, u32 * ndim shape, row-major data
# Tensor names: "param/<name>", "adam.m/<name>", "adam.v/<name>",
# "bn/mean", "bn/var".

MAGIC = b"APGNNCK\0"
FORMAT_VERSION = 1
_DT = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DT_CODE = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def save_checkpoint(ck: Checkpoint, path) -> None:
    header = {
        "config": ck.config.to_dict(),
        "n_items": ck.n_items,
        "n_users": ck.n_users,
        "epoch": ck.epoch,
        "adam_t": ck.adam_t,
        "rng_state": ck.rng_state,
        "history": ck.history,
        "vocab_fingerprint": ck.vocab_fingerprint,
    }
    tensors = {f"param/{k}": v for k, v in ck.params.items()}
    tensors.update({f"adam.m/{k}": v for k, v in ck.adam_m.items()})
    tensors.update({f"adam.v/{k}": v for k, v in ck.adam_v.items()})
    if ck.bn_running is not None:
        tensors.update({f"bn/{k}": v for k, v in ck.bn_running.items()})
    buf = io.BytesIO()
    hb = json.dumps(header).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(hb)))
    buf.write(hb)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        code = _DT_CODE[arr.dtype]
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DT[code]).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from exc
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not an A-PGNN checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dt = _DT[code]
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(raw, dtype=dt, count=size, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
        pos += size * dt.itemsize

    def group(prefix):
        return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}

    bn = group("bn/")
    return Checkpoint(
        config=TrainConfig.from_dict(header["config"]),
        n_items=header["n_items"],
        n_users=header["n_users"],
        params=group("param/"),
        adam_m=group("adam.m/"),
        adam_v=group("adam.v/"),
        adam_t=header["adam_t"],
        epoch=header["epoch"],
        rng_state=header["rng_state"],
        bn_running=bn or None,
        history=header["history"],
        vocab_fingerprint=header.get("vocab_fingerprint", 0),
    )
