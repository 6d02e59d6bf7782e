"""Neighborhood recall models: ItemCF, UserCF, Swing and PersonalRank.

All four work on binary co-occurrence over the merged cross-market
:class:`~xmrank.dataset_io.InteractionIndex`; ratings are ignored here.
Each model is a small scikit-learn style estimator: ``fit(index)`` then
``score(run)`` returning a :class:`~xmrank.scores.ScoreList`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset_io import CandidateLists, InteractionIndex
from .scores import ScoreList

logger = logging.getLogger(__name__)

_BLOCK = 2048


@dataclass(frozen=True)
class SimMatrix:
    """Top-k neighbor lists in CSR layout.

    Row ``r`` holds ``neighbors[indptr[r]:indptr[r+1]]`` with matching
    ``sims``, ordered by descending similarity (ties by ascending id).
    Rows that were not computed are empty.
    """

    kind: str
    top_k: int
    indptr: np.ndarray
    neighbors: np.ndarray
    sims: np.ndarray

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    def row(self, r: int) -> list[tuple[int, float]]:
        lo, hi = self.indptr[r], self.indptr[r + 1]
        return list(zip(self.neighbors[lo:hi].tolist(), self.sims[lo:hi].tolist()))

    def get(self, a: int, b: int) -> float:
        lo, hi = self.indptr[a], self.indptr[a + 1]
        hit = np.flatnonzero(self.neighbors[lo:hi] == b)
        return float(self.sims[lo + hit[0]]) if len(hit) else 0.0

    def to_csr(self) -> sp.csr_matrix:
        m = sp.csr_matrix((self.sims, self.neighbors, self.indptr), shape=(self.n, self.n))
        m = m.copy()
        m.sort_indices()
        return m


def _check_top_k(top_k: int) -> None:
    if int(top_k) < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")


def _truncate_rows(block: sp.csr_matrix, row_ids: np.ndarray, n: int, top_k: int,
                   rows_out: dict) -> None:
    block.sort_indices()
    for local, r in enumerate(row_ids.tolist()):
        lo, hi = block.indptr[local], block.indptr[local + 1]
        cols = block.indices[lo:hi]
        vals = block.data[lo:hi]
        keep = (cols != r) & (vals > 0)
        cols, vals = cols[keep], vals[keep]
        order = np.lexsort((cols, -vals))[:top_k]
        rows_out[r] = (cols[order].astype(np.int64), vals[order])


def _pack(kind: str, top_k: int, n: int, rows: dict) -> SimMatrix:
    indptr = np.zeros(n + 1, dtype=np.int64)
    for r, (cols, _) in rows.items():
        indptr[r + 1] = len(cols)
    np.cumsum(indptr, out=indptr)
    neighbors = np.empty(indptr[-1], dtype=np.int64)
    sims = np.empty(indptr[-1], dtype=np.float64)
    for r, (cols, vals) in rows.items():
        neighbors[indptr[r]:indptr[r + 1]] = cols
        sims[indptr[r]:indptr[r + 1]] = vals
    return SimMatrix(kind, int(top_k), indptr, neighbors, sims)


def _cosine_cooccurrence(entity_ctx: sp.csr_matrix, ctx_weight: np.ndarray, top_k: int,
                         rows: Sequence[int] | None, kind: str) -> SimMatrix:
    """sim(a, b) = sum_{c in ctx(a) & ctx(b)} w_c / sqrt(|ctx(a)| |ctx(b)|)."""
    n = entity_ctx.shape[0]
    deg = np.diff(entity_ctx.indptr).astype(np.float64)
    weighted_t = (entity_ctx @ sp.diags(ctx_weight)).T.tocsr()
    row_ids = np.arange(n) if rows is None else np.unique(np.asarray(rows, dtype=np.int64))
    out: dict = {}
    for start in range(0, len(row_ids), _BLOCK):
        ids = row_ids[start:start + _BLOCK]
        co = sp.csr_matrix(entity_ctx[ids] @ weighted_t)
        local_rows = np.repeat(np.arange(len(ids)), np.diff(co.indptr))
        co.data = co.data / np.sqrt(deg[ids][local_rows] * deg[co.indices])
        _truncate_rows(co, ids, n, top_k, out)
    return _pack(kind, top_k, n, out)


def item_similarity(index: InteractionIndex, top_k: int = 200, use_iuf: bool = False) -> SimMatrix:
    """Cosine item-item co-occurrence, optionally IUF-weighted by 1/log(1+|I_u|)."""
    _check_top_k(top_k)
    if index.nnz == 0:
        raise ValueError("index is empty")
    if use_iuf:
        w = 1.0 / np.log1p(index.user_degree().astype(np.float64))
    else:
        w = np.ones(index.n_users)
    return _cosine_cooccurrence(index.binary(transpose=True), w, top_k, None, "item")


def user_similarity(index: InteractionIndex, top_k: int = 200, use_iuf: bool = False,
                    users: Sequence[int] | None = None) -> SimMatrix:
    """User-user mirror of :func:`item_similarity`.

    ``users`` restricts which rows are computed (others stay empty), which is
    all the scorer needs when only run users are ranked.
    """
    _check_top_k(top_k)
    if index.nnz == 0:
        raise ValueError("index is empty")
    if use_iuf:
        w = 1.0 / np.log1p(index.item_degree().astype(np.float64))
    else:
        w = np.ones(index.n_items)
    return _cosine_cooccurrence(index.binary(), w, top_k, users, "user")


def swing_similarity(index: InteractionIndex, alpha: float = 1.0, top_k: int = 200) -> SimMatrix:
    """Swing: each user pair {u, v} sharing items adds 1/(alpha + |I_u & I_v|)
    to every item pair inside their shared set."""
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    _check_top_k(top_k)
    if index.nnz == 0:
        raise ValueError("index is empty")
    B = index.binary()
    Bt = B.T.tocsr()
    n_items = index.n_items
    acc = sp.csr_matrix((n_items, n_items))
    rows_buf, cols_buf, vals_buf = [], [], []
    buffered = 0
    for start in range(0, index.n_users, _BLOCK):
        stop = min(start + _BLOCK, index.n_users)
        overlap = (B[start:stop] @ Bt).tocoo()
        u = overlap.row + start
        v = overlap.col
        keep = (v > u) & (overlap.data >= 2)
        for uu, vv in zip(u[keep].tolist(), v[keep].tolist()):
            common = np.intersect1d(index.user_history(uu), index.user_history(vv), assume_unique=True)
            c = len(common)
            ii, jj = np.meshgrid(common, common, indexing="ij")
            off = ii != jj
            rows_buf.append(ii[off])
            cols_buf.append(jj[off])
            vals_buf.append(np.full(c * (c - 1), 1.0 / (alpha + c)))
            buffered += c * (c - 1)
        if buffered > 5_000_000:
            acc = acc + _coo_sum(rows_buf, cols_buf, vals_buf, n_items)
            rows_buf, cols_buf, vals_buf, buffered = [], [], [], 0
    if rows_buf:
        acc = acc + _coo_sum(rows_buf, cols_buf, vals_buf, n_items)
    acc = sp.csr_matrix(acc)
    out: dict = {}
    for start in range(0, n_items, _BLOCK):
        ids = np.arange(start, min(start + _BLOCK, n_items))
        _truncate_rows(acc[ids], ids, n_items, top_k, out)
    return _pack("item", top_k, n_items, out)


def _coo_sum(rows, cols, vals, n):
    return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n)).tocsr()


def cf_score(sim: SimMatrix, index: InteractionIndex, user_id: str,
             candidates: Sequence[str]) -> list[float]:
    """Score candidates for one user.

    Item-kind matrices (ItemCF, Swing) sum ``sim(j, i)`` over the user's
    history ``j``; user-kind matrices sum ``sim(u, v)`` over neighbors ``v``
    that interacted with ``i``. Unknown users and items score 0.
    """
    ids = index.ids
    u = ids.user_to_dense.get(user_id)
    if u is None:
        return [0.0] * len(candidates)
    cand = np.array([ids.item_to_dense.get(c, -1) for c in candidates], dtype=np.int64)
    out = np.zeros(len(candidates))
    known = cand >= 0
    if sim.kind == "item":
        acc = np.zeros(index.n_items)
        for j in index.user_history(u).tolist():
            lo, hi = sim.indptr[j], sim.indptr[j + 1]
            np.add.at(acc, sim.neighbors[lo:hi], sim.sims[lo:hi])
    else:
        acc = np.zeros(index.n_items)
        lo, hi = sim.indptr[u], sim.indptr[u + 1]
        for v, s in zip(sim.neighbors[lo:hi].tolist(), sim.sims[lo:hi].tolist()):
            acc[index.user_history(v)] += s
    out[known] = acc[cand[known]]
    return out.tolist()


def _score_run(sim: SimMatrix, index: InteractionIndex, run: CandidateLists, name: str) -> ScoreList:
    """Batched :func:`cf_score` over a whole run via sparse products."""
    ids = index.ids
    S = sim.to_csr()
    B = index.binary()
    scores = {(user, c): 0.0 for user, c in run.pairs()}
    known = [(user, cands, ids.user_to_dense[user]) for user, cands in run.entries
             if user in ids.user_to_dense]
    for start in range(0, len(known), _BLOCK):
        chunk = known[start:start + _BLOCK]
        rows = np.array([u for _, _, u in chunk], dtype=np.int64)
        prod = (B[rows] @ S) if sim.kind == "item" else (S[rows] @ B)
        prod = sp.csr_matrix(prod)
        for local, (user, cands, _) in enumerate(chunk):
            cols = np.array([ids.item_to_dense.get(c, -1) for c in cands], dtype=np.int64)
            ok = cols >= 0
            vals = np.zeros(len(cands))
            if ok.any():
                vals[ok] = prod[local, cols[ok]].toarray().ravel()
            for c, v in zip(cands, vals.tolist()):
                scores[(user, c)] = v
    return ScoreList(name, scores)


@dataclass
class PersonalRankResult:
    item_scores: dict[str, float]
    converged: bool
    n_iter: int
    node_probs: np.ndarray


def bipartite_transition(index: InteractionIndex) -> sp.csr_matrix:
    """Column-stochastic uniform transition over the (M+N)-node bipartite graph.

    Users occupy nodes ``0..M-1`` and items ``M..M+N-1``.
    """
    B = index.binary()
    A = sp.bmat([[None, B], [B.T, None]], format="csr")
    deg = np.asarray(A.sum(axis=0)).ravel()
    inv = np.zeros_like(deg)
    inv[deg > 0] = 1.0 / deg[deg > 0]
    return (A @ sp.diags(inv)).tocsr()


def random_walk_with_restart(W: sp.csr_matrix, start: np.ndarray, restart: float,
                             max_iters: int = 1000, tol: float = 1e-8, callback=None):
    """Iterate ``p <- (1-restart) W p + restart e`` column-wise from ``start``.

    ``start`` is an array of node ids; returns ``(P, converged, n_iter)``
    where ``P`` has one column per start node and ``converged`` is per column.
    """
    if not 0 < restart < 1:
        raise ValueError(f"restart must be in (0, 1), got {restart}")
    start = np.atleast_1d(np.asarray(start, dtype=np.int64))
    E = np.zeros((W.shape[0], len(start)))
    E[start, np.arange(len(start))] = 1.0
    P = E.copy()
    converged = np.zeros(len(start), dtype=bool)
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        nxt = (1.0 - restart) * (W @ P) + restart * E
        delta = np.abs(nxt - P).sum(axis=0)
        P = nxt
        if callback is not None:
            callback(n_iter, P)
        converged = delta < tol
        if converged.all():
            break
    return P, converged, n_iter


def personal_rank(index: InteractionIndex, user_id: str, restart: float = 0.15,
                  max_iters: int = 1000, tol: float = 1e-8) -> PersonalRankResult:
    u = index.ids.user_to_dense.get(user_id)
    if u is None:
        return PersonalRankResult({}, False, 0, np.zeros(0))
    W = bipartite_transition(index)
    P, conv, n_iter = random_walk_with_restart(W, np.array([u]), restart, max_iters, tol)
    p = P[:, 0]
    if not conv[0]:
        logger.warning("PersonalRank for %s did not converge in %d iterations", user_id, max_iters)
    M = index.n_users
    items = {iid: float(p[M + k]) for k, iid in enumerate(index.ids.item_ids)}
    return PersonalRankResult(items, bool(conv[0]), n_iter, p)


class _Recall(BaseEstimator):
    name = "recall"

    def score(self, run: CandidateLists) -> ScoreList:
        check_is_fitted(self, "sim_")
        return _score_run(self.sim_, self.index_, run, self.name)

    def score_user(self, user_id: str, candidates: Sequence[str]) -> list[float]:
        check_is_fitted(self, "sim_")
        return cf_score(self.sim_, self.index_, user_id, candidates)


class ItemCF(_Recall):
    name = "itemcf"

    def __init__(self, top_k: int = 200, use_iuf: bool = False):
        self.top_k = top_k
        self.use_iuf = use_iuf

    def fit(self, index: InteractionIndex, y=None):
        self.index_ = index
        self.sim_ = item_similarity(index, self.top_k, self.use_iuf)
        return self


class UserCF(_Recall):
    name = "usercf"

    def __init__(self, top_k: int = 200, use_iuf: bool = False):
        self.top_k = top_k
        self.use_iuf = use_iuf

    def fit(self, index: InteractionIndex, y=None, users: Sequence[str] | None = None):
        """``users`` (raw ids) limits similarity rows to the users that will be scored."""
        self.index_ = index
        rows = None
        if users is not None:
            rows = [index.ids.user_to_dense[u] for u in users if u in index.ids.user_to_dense]
        self.sim_ = user_similarity(index, self.top_k, self.use_iuf, rows)
        return self


class Swing(_Recall):
    name = "swing"

    def __init__(self, alpha: float = 1.0, top_k: int = 200):
        self.alpha = alpha
        self.top_k = top_k

    def fit(self, index: InteractionIndex, y=None):
        self.index_ = index
        self.sim_ = swing_similarity(index, self.alpha, self.top_k)
        return self


class PersonalRank(BaseEstimator):
    name = "personalrank"

    def __init__(self, restart: float = 0.15, max_iters: int = 1000, tol: float = 1e-8,
                 batch_size: int = 64):
        self.restart = restart
        self.max_iters = max_iters
        self.tol = tol
        self.batch_size = batch_size

    def fit(self, index: InteractionIndex, y=None):
        self.index_ = index
        self.transition_ = bipartite_transition(index)
        return self

    def score(self, run: CandidateLists) -> ScoreList:
        check_is_fitted(self, "transition_")
        ids = self.index_.ids
        M = self.index_.n_users
        scores = {}
        known = [(user, cands, ids.user_to_dense[user]) for user, cands in run.entries
                 if user in ids.user_to_dense]
        n_unconverged = 0
        for start in range(0, len(known), self.batch_size):
            chunk = known[start:start + self.batch_size]
            P, conv, _ = random_walk_with_restart(
                self.transition_, np.array([u for _, _, u in chunk]), self.restart,
                self.max_iters, self.tol)
            n_unconverged += int((~conv).sum())
            for col, (user, cands, _) in enumerate(chunk):
                for c in cands:
                    i = ids.item_to_dense.get(c)
                    scores[(user, c)] = float(P[M + i, col]) if i is not None else 0.0
        if n_unconverged:
            logger.warning("PersonalRank: %d users did not converge", n_unconverged)
        for user, cands in run.entries:
            if user not in ids.user_to_dense:
                for c in cands:
                    scores[(user, c)] = 0.0
        return ScoreList(self.name, scores)
