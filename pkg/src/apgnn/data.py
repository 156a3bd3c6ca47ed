"""Interaction logs -> per-user session corpora -> supervised instances."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError

CORPUS_FORMAT = "apgnn-corpus"
CORPUS_VERSION = 1


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class SessionCorpus:
    """Sessions per user, items as dense indices into ``items``.

    ``sessions[u]`` is user ``u``'s chronologically ordered list of sessions.
    """

    users: list[str] = field(default_factory=list)
    items: list[str] = field(default_factory=list)
    sessions: list[list[list[int]]] = field(default_factory=list)

    @property
    def user_vocab(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.users)}

    @property
    def item_vocab(self) -> dict[str, int]:
        return {v: i for i, v in enumerate(self.items)}

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    def num_sessions(self) -> int:
        return sum(len(s) for s in self.sessions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SessionCorpus):
            return NotImplemented
        return self.users == other.users and self.items == other.items and self.sessions == other.sessions


@dataclass(frozen=True)
class TrainingInstance:
    user: int
    history: tuple[tuple[int, ...], ...]
    prefix: tuple[int, ...]
    label: int
    n_prior: int = 0  # sessions the user had before this one, before the cap M
    session_key: tuple[int, int] = (0, 0)
    last: bool = False  # prefix covers the session up to its final click


# ------------------------------------------------------------------ ingestion


def parse_interactions(lines: Iterable[str], keep: Callable[[list[str]], bool] | None = None, source: str = "<input>") -> list[Interaction]:
    """Parse ``user<TAB>item<TAB>timestamp`` lines.

    Blank lines and lines starting with ``#`` are skipped.  Extra columns are
    allowed and passed to ``keep`` (a per-row predicate, e.g. to discard an
    action type) together with the first three.
    """
    out = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 3:
            raise DataError(f"{source}:{lineno}: expected 3 tab-separated fields, got {len(cols)}")
        user, item, ts = cols[0], cols[1], cols[2]
        if not user or not item:
            raise DataError(f"{source}:{lineno}: empty user or item id")
        try:
            t = int(ts)
        except ValueError:
            raise DataError(f"{source}:{lineno}: timestamp {ts!r} is not an integer") from None
        if t < 0:
            raise DataError(f"{source}:{lineno}: negative timestamp {t}")
        if keep is not None and not keep(cols):
            continue
        out.append(Interaction(user, item, t))
    return out


def read_interactions(path, keep=None) -> list[Interaction]:
    with open(path, encoding="utf-8") as fh:
        return parse_interactions(fh, keep=keep, source=str(path))


def _collapse(seq: Iterable[int]) -> list[int]:
    out: list[int] = []
    for x in seq:
        if not out or out[-1] != x:
            out.append(x)
    return out


def split_sessions(events: Sequence[Interaction], idle_minutes: float = 30) -> SessionCorpus:
    """Cut each user's timeline wherever two consecutive events are more
    than ``idle_minutes`` apart; collapse consecutive repeats of an item."""
    if not events:
        return SessionCorpus()
    user_vocab: dict[str, int] = {}
    ucode = np.empty(len(events), dtype=np.int64)
    ts = np.empty(len(events), dtype=np.int64)
    for k, e in enumerate(events):
        ucode[k] = user_vocab.setdefault(e.user_id, len(user_vocab))
        ts[k] = e.timestamp
    order = np.lexsort((ts, ucode))  # stable: ties keep input order
    su, st = ucode[order], ts[order]
    gap = idle_minutes * 60
    brk = np.ones(len(order), dtype=bool)
    brk[1:] = (su[1:] != su[:-1]) | ((st[1:] - st[:-1]) > gap)

    items: dict[str, int] = {}
    sessions: list[list[list[int]]] = [[] for _ in user_vocab]
    cur: list[int] = []
    for k, idx in enumerate(order):
        if brk[k] and cur:
            sessions[su[k - 1]].append(_collapse(cur))
            cur = []
        cur.append(items.setdefault(events[idx].item_id, len(items)))
    sessions[su[-1]].append(_collapse(cur))
    return SessionCorpus(list(user_vocab), list(items), sessions)


# ------------------------------------------------------------------ filtering


def _reindex(users: list[str], items: list[str], sessions: list[list[list[int]]], keep_users: list[int]) -> SessionCorpus:
    used = sorted({v for u in keep_users for s in sessions[u] for v in s})
    remap = {old: new for new, old in enumerate(used)}
    return SessionCorpus(
        [users[u] for u in keep_users],
        [items[v] for v in used],
        [[[remap[v] for v in s] for s in sessions[u]] for u in keep_users],
    )


def filter_corpus(c: SessionCorpus, min_session_len: int = 3, min_user_sessions: int = 5) -> SessionCorpus:
    sessions = [list(s) for s in c.sessions]
    alive = list(range(c.n_users))
    while True:
        changed = False
        for u in alive:
            kept = [s for s in sessions[u] if len(s) >= min_session_len]
            if len(kept) != len(sessions[u]):
                sessions[u] = kept
                changed = True
        survivors = [u for u in alive if len(sessions[u]) >= min_user_sessions]
        if len(survivors) != len(alive):
            alive = survivors
            changed = True
        if not changed:
            break
    return _reindex(c.users, c.items, sessions, alive)


def _cut(n: int, frac: float) -> int:
    if n < 2:
        return n
    k = math.floor(n * frac + 1e-9)
    return min(max(k, 1), n - 1)


def split_train_test(c: SessionCorpus, train_frac: float = 0.8, reindex: bool = True) -> tuple[SessionCorpus, SessionCorpus]:
    """Chronological per-user split.

    The first ``floor(n * train_frac)`` sessions (at least one on each side
    when n >= 2) go to the first corpus.  Items of the second part unseen in
    the first are dropped; sessions left shorter than 2 are discarded.  With
    ``reindex`` the item vocabulary shrinks to the first part's items.
    """
    if not 0 < train_frac < 1:
        raise DataError(f"train_frac must lie in (0, 1), got {train_frac}")
    head = [s[: _cut(len(s), train_frac)] for s in c.sessions]
    tail = [s[_cut(len(s), train_frac):] for s in c.sessions]
    seen = {v for ss in head for s in ss for v in s}
    tail = [[t for t in (_collapse(v for v in s if v in seen) for s in ss) if len(t) >= 2] for ss in tail]
    if not reindex:
        return (SessionCorpus(list(c.users), list(c.items), head), SessionCorpus(list(c.users), list(c.items), tail))
    used = sorted(seen)
    remap = {old: new for new, old in enumerate(used)}
    items = [c.items[v] for v in used]

    def rm(ss):
        return [[[remap[v] for v in s] for s in u] for u in ss]

    return SessionCorpus(list(c.users), items, rm(head)), SessionCorpus(list(c.users), list(items), rm(tail))


# ------------------------------------------------------------------ instances


def make_instances(
    c: SessionCorpus,
    M: int = 50,
    max_session_len: int = 20,
    context: Sequence[SessionCorpus] = (),
) -> list[TrainingInstance]:
    """Expand sessions into (history, prefix, label) examples.

    ``context`` corpora hold sessions that precede ``c`` chronologically for
    the same users (e.g. the training part when building test instances);
    they feed history but emit no instances.  Sessions without any earlier
    session are skipped.
    """
    if M < 0 or max_session_len < 1:
        raise DataError(f"need M >= 0 and max_session_len >= 1, got {M}, {max_session_len}")
    out = []
    for u in range(c.n_users):
        earlier: list[list[int]] = []
        for ctx in context:
            earlier.extend(ctx.sessions[u])
        offset = len(earlier)
        timeline = earlier + list(c.sessions[u])
        for i in range(offset, len(timeline)):
            if i == 0:
                continue
            hist = tuple(tuple(s) for s in timeline[max(0, i - M) : i]) if M else ()
            sess = timeline[i]
            for p in range(1, len(sess)):
                out.append(
                    TrainingInstance(
                        user=u,
                        history=hist,
                        prefix=tuple(sess[max(0, p - max_session_len) : p]),
                        label=sess[p],
                        n_prior=i,
                        session_key=(u, i),
                        last=p == len(sess) - 1,
                    )
                )
    return out


# ---------------------------------------------------------------- statistics


def corpus_stats(c: SessionCorpus) -> dict[str, float]:
    lens = [len(s) for ss in c.sessions for s in ss]
    active = sum(1 for ss in c.sessions if ss)
    return {
        "users": active,
        "items": len({v for ss in c.sessions for s in ss for v in s}),
        "sessions": len(lens),
        "avg_session_length": float(np.mean(lens)) if lens else 0.0,
        "sessions_per_user": len(lens) / active if active else 0.0,
    }


# -------------------------------------------------------------- persistence
#
# A corpus file is UTF-8 JSON:
#   {"format": "apgnn-corpus", "version": 1,
#    "users": [user_id, ...],            # index = dense user index
#    "items": [item_id, ...],            # index = dense item index
#    "sessions": [[[v, ...], ...], ...]} # sessions[u] = user u's sessions


def save_corpus(c: SessionCorpus, path) -> None:
    doc = {"format": CORPUS_FORMAT, "version": CORPUS_VERSION, "users": c.users, "items": c.items, "sessions": c.sessions}
    Path(path).write_text(json.dumps(doc, separators=(",", ":")), encoding="utf-8")


def load_corpus(path) -> SessionCorpus:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read corpus ({exc})") from exc
    if doc.get("format") != CORPUS_FORMAT or doc.get("version") != CORPUS_VERSION:
        raise DataError(f"{path}: not an {CORPUS_FORMAT} v{CORPUS_VERSION} file")
    c = SessionCorpus(list(doc["users"]), list(doc["items"]), [[list(s) for s in ss] for ss in doc["sessions"]])
    if len(c.sessions) != c.n_users:
        raise DataError(f"{path}: {len(c.sessions)} session lists for {c.n_users} users")
    return c
