"""Brute-force reference implementations shared by unit and acceptance tests.

Everything here works on plain dicts/sets and dense numpy, with no code shared
with the package paths being checked.
"""

import itertools
import math

import numpy as np


def histories(index):
    """user -> set(items), item -> set(users) over dense ids."""
    # explicit zero ratings are interactions too, so walk the structure
    m = index.user_items
    dense = np.zeros(m.shape, dtype=bool)
    for u in range(m.shape[0]):
        for k in range(m.indptr[u], m.indptr[u + 1]):
            dense[u, m.indices[k]] = True
    users = {u: set(np.flatnonzero(dense[u]).tolist()) for u in range(m.shape[0])}
    items = {i: set(np.flatnonzero(dense[:, i]).tolist()) for i in range(m.shape[1])}
    return users, items


def item_sim(index, use_iuf=False):
    users, items = histories(index)
    out = {}
    for a, b in itertools.permutations(items, 2):
        common = items[a] & items[b]
        if not common:
            continue
        if use_iuf:
            num = sum(1.0 / math.log(1 + len(users[u])) for u in sorted(common))
        else:
            num = float(len(common))
        out[(a, b)] = num / math.sqrt(len(items[a]) * len(items[b]))
    return out


def user_sim(index, use_iuf=False):
    users, items = histories(index)
    out = {}
    for u, v in itertools.permutations(users, 2):
        common = users[u] & users[v]
        if not common:
            continue
        if use_iuf:
            num = sum(1.0 / math.log(1 + len(items[i])) for i in sorted(common))
        else:
            num = float(len(common))
        out[(u, v)] = num / math.sqrt(len(users[u]) * len(users[v]))
    return out


def swing_sim(index, alpha=1.0):
    users, items = histories(index)
    out = {}
    for a, b in itertools.permutations(items, 2):
        common = sorted(items[a] & items[b])
        s = 0.0
        for u, v in itertools.combinations(common, 2):
            s += 1.0 / (alpha + len(users[u] & users[v]))
        if s > 0:
            out[(a, b)] = s
    return out


def item_cf_scores(sim, index, u):
    users, items = histories(index)
    return {i: sum(sim.get((j, i), 0.0) for j in sorted(users[u])) for i in items}


def user_cf_scores(sim, index, u):
    users, items = histories(index)
    return {i: sum(sim.get((u, v), 0.0) for v in sorted(users) if v != u and i in users[v])
            for i in items}


def dcg_rank(rank):
    return 1.0 / math.log2(rank + 1)


def ndcg_brute(ranked, positives, k=10):
    dcg = sum(dcg_rank(r) for r, item in enumerate(ranked[:k], start=1) if item in positives)
    ideal = sum(dcg_rank(r) for r in range(1, min(k, len(positives)) + 1))
    return dcg / ideal if ideal > 0 else 0.0


def hr_brute(ranked, positives, k=10):
    return 1.0 if any(item in positives for item in ranked[:k]) else 0.0
