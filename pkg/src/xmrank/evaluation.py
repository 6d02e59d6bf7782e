"""NDCG@k / HR@k over candidate runs, and the weighted-average ensemble."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset_io import CandidateLists
from .scores import ScoreList

logger = logging.getLogger(__name__)


def ndcg_at_k(ranked_items, positives, k: int = 10) -> float:
    """Binary-gain NDCG with discount ``1 / log2(rank + 1)``, ranks from 1."""
    positives = set(positives)
    if not positives:
        return 0.0
    dcg = sum(1.0 / math.log2(r + 1) for r, item in enumerate(ranked_items[:k], start=1)
              if item in positives)
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, len(positives)) + 1))
    return dcg / idcg


def hr_at_k(ranked_items, positives, k: int = 10) -> float:
    positives = set(positives)
    return 1.0 if any(item in positives for item in ranked_items[:k]) else 0.0


@dataclass
class MetricReport:
    name: str
    ndcg: float
    hr: float
    n_users: int
    k: int = 10
    split: str = ""
    per_user: dict[str, tuple[float, float]] = field(default_factory=dict, repr=False)

    def key_values(self) -> str:
        return (f"model={self.name} split={self.split or '-'} users={self.n_users} "
                f"ndcg@{self.k}={self.ndcg:.4f} hr@{self.k}={self.hr:.4f}")


def format_table(reports: list[MetricReport]) -> str:
    if not reports:
        return ""
    k = reports[0].k
    width = max(10, *(len(r.name) for r in reports))
    lines = [f"{'model':<{width}}  {'split':<8}  {'users':>7}  {f'NDCG@{k}':>8}  {f'HR@{k}':>8}"]
    for r in reports:
        lines.append(f"{r.name:<{width}}  {r.split or '-':<8}  {r.n_users:>7d}  {r.ndcg:>8.4f}  {r.hr:>8.4f}")
    return "\n".join(lines)


def _positives_by_user(qrel: dict[tuple[str, str], float]) -> dict[str, set[str]]:
    out: dict[str, set[str]] = {}
    for (u, i), rel in qrel.items():
        if rel > 0:
            out.setdefault(u, set()).add(i)
    return out


def _stable_ranks(flat: np.ndarray, user_of: np.ndarray, position: np.ndarray) -> np.ndarray:
    """1-based rank of every pair within its user: descending score, ties by input order."""
    order = np.lexsort((position, -flat, user_of))
    ranks = np.empty(len(flat), dtype=np.int64)
    starts = np.r_[0, np.flatnonzero(np.diff(user_of[order])) + 1]
    counts = np.diff(np.r_[starts, len(order)])
    ranks[order] = np.arange(len(order)) - np.repeat(starts, counts) + 1
    return ranks


class _RunLayout:
    """Flat arrays describing a run against a qrel, reused across many scorings."""

    def __init__(self, run: CandidateLists, qrel, k: int):
        positives = _positives_by_user(qrel)
        self.users = []
        missing = 0
        keep_entries = []
        for user, cands in run.entries:
            if user not in positives:
                missing += 1
                continue
            keep_entries.append((user, cands))
            self.users.append(user)
        if missing:
            logger.warning("%d run users have no positive in the qrel and are excluded", missing)
        self.kept = CandidateLists(keep_entries)
        lens = np.array([len(c) for _, c in keep_entries], dtype=np.int64)
        self.user_of = np.repeat(np.arange(len(keep_entries)), lens)
        self.position = np.concatenate([np.arange(n) for n in lens]) if len(lens) else np.zeros(0, np.int64)
        self.is_pos = np.array([i in positives[u] for u, c in keep_entries for i in c], dtype=bool)
        n_pos = np.array([len(positives[u]) for u in self.users], dtype=np.int64)
        self.idcg = np.array([sum(1.0 / math.log2(r + 1) for r in range(1, min(k, n) + 1)) for n in n_pos])
        self.k = k
        # selects the kept users' pairs out of a flat array over the full run
        keep_user = set(self.users)
        self.mask = np.array([u in keep_user for u, c in run.entries for _ in c], dtype=bool)

    def per_user(self, flat_kept: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.users)
        if n == 0:
            return np.zeros(0), np.zeros(0)
        ranks = _stable_ranks(flat_kept, self.user_of, self.position)
        hit = self.is_pos & (ranks <= self.k)
        gains = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
        dcg = np.bincount(self.user_of, weights=gains, minlength=n)
        hr = np.bincount(self.user_of, weights=hit.astype(np.float64), minlength=n) > 0
        return dcg / self.idcg, hr.astype(np.float64)


def evaluate_flat(flat: np.ndarray, layout: _RunLayout) -> tuple[float, float]:
    ndcg, hr = layout.per_user(np.asarray(flat, dtype=np.float64)[layout.mask])
    if len(ndcg) == 0:
        return 0.0, 0.0
    return float(ndcg.mean()), float(hr.mean())


def evaluate_run(scores: ScoreList, run: CandidateLists, qrel, k: int = 10, split: str = "") -> MetricReport:
    """Macro-averaged NDCG@k / HR@k; users without qrel positives are skipped."""
    layout = _RunLayout(run, qrel, k)
    flat = np.concatenate([scores.for_user(u, c, strict=True) for u, c in layout.kept.entries]
                          + [np.zeros(0)])
    ndcg, hr = layout.per_user(flat)
    per_user = {u: (float(a), float(b)) for u, a, b in zip(layout.users, ndcg, hr)}
    n = len(layout.users)
    return MetricReport(scores.model_name, float(ndcg.mean()) if n else 0.0,
                        float(hr.mean()) if n else 0.0, n, k, split, per_user)


@dataclass
class EnsembleSpec:
    members: list[str]
    weights: list[float]
    normalization: str = "minmax"

    def __post_init__(self):
        if len(self.members) != len(self.weights):
            raise ValueError("one weight per member required")
        if any(w < 0 for w in self.weights) or sum(self.weights) <= 0:
            raise ValueError("weights must be non-negative with a positive sum")
        if self.normalization not in ("none", "minmax"):
            raise ValueError(f"normalization must be 'none' or 'minmax', got {self.normalization!r}")


def minmax_per_user(flat: np.ndarray, run: CandidateLists) -> np.ndarray:
    """Rescale each user's scores to [0, 1]; constant lists map to 0."""
    out = np.zeros_like(flat, dtype=np.float64)
    start = 0
    for _, cands in run.entries:
        stop = start + len(cands)
        seg = flat[start:stop]
        if len(seg):
            lo, hi = seg.min(), seg.max()
            if hi > lo:
                out[start:stop] = (seg - lo) / (hi - lo)
        start = stop
    return out


def _member_matrix(members: list[ScoreList], run: CandidateLists, normalize: bool) -> np.ndarray:
    cols = []
    pairs = list(run.pairs())
    for m in members:
        try:
            flat = np.array([m.scores[p] for p in pairs], dtype=np.float64)
        except KeyError as exc:
            raise KeyError(f"ensemble member {m.model_name!r} has no score for {exc.args[0]}") from None
        cols.append(minmax_per_user(flat, run) if normalize else flat)
    return np.stack(cols, axis=1) if cols else np.zeros((len(pairs), 0))


def weighted_ensemble(members: list[ScoreList], weights, run: CandidateLists,
                      normalize: bool = True, name: str = "ensemble") -> ScoreList:
    """Per pair ``sum_m w_m s_m / sum_m w_m`` with optional per-user min-max first."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(members):
        raise ValueError("one weight per member required")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    S = _member_matrix(members, run, normalize)
    return ScoreList.from_flat(name, run, S @ (weights / weights.sum()))


def simplex_grid(n_members: int, step: float = 0.1):
    """All non-negative weight vectors on the ``step`` lattice summing to 1."""
    units = int(round(1.0 / step))
    for cut in itertools.combinations(range(units + n_members - 1), n_members - 1):
        bounds = (-1, *cut, units + n_members - 1)
        yield tuple((bounds[j + 1] - bounds[j] - 1) / units for j in range(n_members))


def grid_search_weights(members: list[ScoreList], run: CandidateLists, qrel, step: float = 0.1,
                        k: int = 10, normalize: bool = True):
    """Weights maximising NDCG@k on ``run``; the first maximiser in lattice order wins."""
    S = _member_matrix(members, run, normalize)
    layout = _RunLayout(run, qrel, k)
    best_w, best = None, -1.0
    for w in simplex_grid(len(members), step):
        ndcg, _ = evaluate_flat(S @ np.asarray(w), layout)
        if ndcg > best + 1e-12:
            best_w, best = w, ndcg
    return list(best_w), best


def ranked(scores: ScoreList, run: CandidateLists) -> list[tuple[str, list[tuple[str, float]]]]:
    out = []
    for user, cands in run.entries:
        vals = scores.for_user(user, cands, strict=True)
        order = np.lexsort((np.arange(len(cands)), -vals))
        out.append((user, [(cands[j], float(vals[j])) for j in order]))
    return out


def write_submission(scores: ScoreList, run: CandidateLists, path, run_shape_path=None) -> None:
    """``user_id<TAB>item_id<TAB>score`` sorted by descending score per user.

    ``run_shape_path`` additionally writes one line per user with the sorted
    candidates comma-joined, like the input run file.
    """
    rows = ranked(scores, run)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for user, items in rows:
            for item, s in items:
                fh.write(f"{user}\t{item}\t{s!r}\n")
    if run_shape_path is not None:
        with open(run_shape_path, "w", encoding="utf-8", newline="\n") as fh:
            for user, items in rows:
                fh.write(f"{user}\t{','.join(i for i, _ in items)}\n")
