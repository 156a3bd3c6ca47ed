"""Deterministic toy corpora with known transition structure."""
from __future__ import annotations

import numpy as np

from .data import Interaction, SessionCorpus


def markov_corpus(n_users=20, n_items=50, sessions_per_user=22, cycle_len=12, min_len=4, max_len=7, seed=0) -> SessionCorpus:
    """Each user walks a private cycle over ``cycle_len`` of the items.

    The next item is a deterministic function of (user, current item).
    """
    rng = np.random.default_rng(seed)
    sessions = []
    for _ in range(n_users):
        cycle = rng.choice(n_items, size=cycle_len, replace=False)
        succ = {int(cycle[k]): int(cycle[(k + 1) % cycle_len]) for k in range(cycle_len)}
        user = []
        for _ in range(sessions_per_user):
            v = int(rng.choice(cycle))
            s = [v]
            for _ in range(int(rng.integers(min_len, max_len + 1)) - 1):
                v = succ[v]
                s.append(v)
            user.append(s)
        sessions.append(user)
    return SessionCorpus([f"u{u}" for u in range(n_users)], [f"i{v}" for v in range(n_items)], sessions)


def cohort_corpus(n_users=40, n_items=50, sessions_per_user=15, session_len=3, max_step=4, seed=0) -> SessionCorpus:
    """Two cohorts walk the same item ring in opposite directions.

    Even users step forward by a random 1..max_step, odd users step backward
    by the same amounts, so the current click alone leaves 2 * max_step
    plausible successors while the user's direction narrows it to max_step.
    """
    rng = np.random.default_rng(seed)
    sessions = []
    for u in range(n_users):
        sign = 1 if u % 2 == 0 else -1
        user = []
        for _ in range(sessions_per_user):
            v = int(rng.integers(n_items))
            s = [v]
            for _ in range(session_len - 1):
                v = (v + sign * int(rng.integers(1, max_step + 1))) % n_items
                s.append(v)
            user.append(s)
        sessions.append(user)
    return SessionCorpus([f"u{u}" for u in range(n_users)], [f"i{v}" for v in range(n_items)], sessions)


def to_interactions(c: SessionCorpus, gap_minutes=120, step_seconds=60, start=1_500_000_000) -> list[Interaction]:
    """Lay sessions out on a timeline so that an idle split at any threshold
    between ``step_seconds`` and ``gap_minutes`` recovers them."""
    out = []
    for u, user in enumerate(c.sessions):
        t = start
        for s in user:
            for v in s:
                out.append(Interaction(c.users[u], c.items[v], t))
                t += step_seconds
            t += gap_minutes * 60
    return out


def random_interactions(n_events=10_000, n_users=50, n_items=200, seed=0, max_gap_minutes=90) -> list[Interaction]:
    """Unstructured events with random gaps and occasional repeats and ties."""
    rng = np.random.default_rng(seed)
    users = rng.integers(n_users, size=n_events)
    items = rng.integers(n_items, size=n_events)
    gaps = rng.integers(0, max_gap_minutes * 60, size=n_events)
    repeat = rng.random(n_events) < 0.15
    clock = np.zeros(n_users, dtype=np.int64)
    last = np.full(n_users, -1)
    out = []
    for k in range(n_events):
        u = users[k]
        clock[u] += gaps[k]
        v = last[u] if repeat[k] and last[u] >= 0 else items[k]
        last[u] = v
        out.append(Interaction(f"u{u}", f"i{v}", int(clock[u])))
    order = rng.permutation(n_events)  # input order need not be chronological
    return [out[i] for i in order]
