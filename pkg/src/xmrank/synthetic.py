"""Block-structured synthetic markets for end-to-end tests and demos.

Items are split into ``n_clusters`` contiguous blocks and every user belongs
to one taste cluster. Inside their block a user has a taste centre; the
affinity of an item decays as a Gaussian of its distance to that centre
(width ``locality``), optionally multiplied by Zipf popularity. A user's
history mixes affinity draws with a small share of uniform noise, and one
held-out item per split is drawn from the in-block affinity alone. Candidate
lists mix that positive with uniformly drawn unseen items.

Folder layout mirrors the contest data::

    <root>/<target>/train.tsv, train_5core.tsv, valid_run.tsv, valid_qrel.tsv,
                    test_run.tsv, test_qrel.tsv
    <root>/<source>/train.tsv, train_5core.tsv
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset_io import CandidateLists, InteractionTable, write_interactions, write_run


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 200
    n_items: int = 100
    n_clusters: int = 2
    n_source_users: int = 200
    min_interactions: int = 8
    max_interactions: int = 12
    in_cluster: float = 0.9
    locality: float = 3.0
    zipf: float = 0.0
    n_candidates: int = 50
    target: str = "t1"
    sources: tuple[str, ...] = ("s1",)
    seed: int = 0


def _cluster_of_item(n_items: int, n_clusters: int) -> np.ndarray:
    return (np.arange(n_items) * n_clusters) // n_items


def _affinity(rng, spec: SyntheticSpec, item_cluster: np.ndarray, cluster: int) -> np.ndarray:
    """In-block taste distribution of one user (zero outside their block)."""
    members = np.flatnonzero(item_cluster == cluster)
    centre = rng.uniform(0, len(members))
    pos = np.arange(len(members))
    w = np.zeros(spec.n_items)
    w[members] = np.exp(-0.5 * ((pos - centre) / spec.locality) ** 2)
    if spec.zipf > 0:
        w[members] *= 1.0 / (pos + 1.0) ** spec.zipf
    return w / w.sum()


def _draw(rng, weights: np.ndarray, exclude: set[int]) -> int:
    w = weights.copy()
    if exclude:
        w[list(exclude)] = 0.0
    if w.sum() <= 0:
        w = np.ones_like(w)
        w[list(exclude)] = 0.0
    return int(rng.choice(len(w), p=w / w.sum()))


def _user_history(rng, spec, affinity, uniform):
    n = int(rng.integers(spec.min_interactions, spec.max_interactions + 1))
    seen: list[int] = []
    for _ in range(n):
        dist = affinity if rng.random() < spec.in_cluster else uniform
        seen.append(_draw(rng, dist, set(seen)))
    return seen


def _rating(rng, in_block: bool) -> float:
    return float(rng.integers(4, 6) if in_block else rng.integers(1, 4))


def _five_core_subset(rows: list[tuple[str, str, float]]) -> list[tuple[str, str, float]]:
    ucount: dict[str, int] = {}
    icount: dict[str, int] = {}
    for u, i, _ in rows:
        ucount[u] = ucount.get(u, 0) + 1
        icount[i] = icount.get(i, 0) + 1
    return [r for r in rows if ucount[r[0]] >= 5 and icount[r[1]] >= 5]


def generate(spec: SyntheticSpec = SyntheticSpec()) -> dict:
    """Return in-memory tables, runs and qrels for every market."""
    rng = np.random.default_rng(spec.seed)
    item_cluster = _cluster_of_item(spec.n_items, spec.n_clusters)
    items = [f"P{j:04d}" for j in range(spec.n_items)]
    uniform = np.full(spec.n_items, 1.0 / spec.n_items)
    markets = {}

    for m, market in enumerate((spec.target, *spec.sources)):
        n_users = spec.n_users if m == 0 else spec.n_source_users
        rows, runs, qrels = [], {"valid": [], "test": []}, {"valid": {}, "test": {}}
        for k in range(n_users):
            user = f"{market}U{k:04d}"
            c = k % spec.n_clusters
            affinity = _affinity(rng, spec, item_cluster, c)
            hist = _user_history(rng, spec, affinity, uniform)
            rows += [(user, items[j], _rating(rng, item_cluster[j] == c)) for j in hist]
            if m != 0:
                continue
            held = set(hist)
            positives = {}
            for split in ("valid", "test"):
                positives[split] = _draw(rng, affinity, held)
                held.add(positives[split])
            for split in ("valid", "test"):
                pool = np.array(sorted(set(range(spec.n_items)) - held))
                n_neg = min(spec.n_candidates - 1, len(pool))
                negs = rng.choice(pool, size=n_neg, replace=False)
                cands = rng.permutation(np.r_[positives[split], negs])
                runs[split].append((user, [items[j] for j in cands]))
                qrels[split][(user, items[positives[split]])] = 1.0
        order = rng.permutation(len(rows))
        rows = [rows[j] for j in order]
        markets[market] = {
            "train": InteractionTable.from_rows(rows, market=market),
            "train_5core": InteractionTable.from_rows(_five_core_subset(rows), market=market),
            "runs": {s: CandidateLists(v) for s, v in runs.items()} if m == 0 else {},
            "qrels": qrels if m == 0 else {},
        }
    return markets


def write_dataset(root, spec: SyntheticSpec = SyntheticSpec()) -> Path:
    root = Path(root)
    for market, parts in generate(spec).items():
        folder = root / market
        folder.mkdir(parents=True, exist_ok=True)
        write_interactions(parts["train"], folder / "train.tsv")
        write_interactions(parts["train_5core"], folder / "train_5core.tsv")
        for split, run in parts["runs"].items():
            write_run(run, folder / f"{split}_run.tsv")
            with open(folder / f"{split}_qrel.tsv", "w", encoding="utf-8", newline="\n") as fh:
                fh.write("userId\titemId\trating\n")
                for (u, i), r in parts["qrels"][split].items():
                    fh.write(f"{u}\t{i}\t{r!r}\n")
    return root


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="write a synthetic multi-market dataset")
    p.add_argument("out")
    p.add_argument("--users", type=int, default=SyntheticSpec.n_users)
    p.add_argument("--items", type=int, default=SyntheticSpec.n_items)
    p.add_argument("--source-users", type=int, default=SyntheticSpec.n_source_users)
    p.add_argument("--candidates", type=int, default=SyntheticSpec.n_candidates)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)
    write_dataset(a.out, SyntheticSpec(n_users=a.users, n_items=a.items, n_source_users=a.source_users,
                                       n_candidates=a.candidates, seed=a.seed))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
