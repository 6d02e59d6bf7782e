"""Histogram gradient-boosted trees with logistic and LambdaRank objectives.

Each feature is cut into at most ``n_bins - 1`` equal-frequency value bins;
the last bin slot holds NaN. Trees grow depth-wise. For every frontier node
the split maximising the second-order gain

    0.5 * (G_L^2 / (H_L + lambda) + G_R^2 / (H_R + lambda) - G^2 / (H + lambda))

is chosen over all (feature, threshold bin, missing-direction) triples, and
leaves take the Newton value ``-G / (H + lambda)``. A row goes left when its
bin is ``<= threshold``, which on raw values means ``x < edge``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._binio import read_container, write_container

logger = logging.getLogger(__name__)

OBJECTIVES = ("pointwise_logistic", "pairwise_lambdarank")
_PROB_CLIP = 1e-6


@dataclass(frozen=True)
class GbdtParams:
    n_trees: int = 300
    learning_rate: float = 0.05
    max_depth: int = 6
    min_child_weight: float = 1e-3
    n_bins: int = 64
    lambda_l2: float = 1.0
    objective: str = "pointwise_logistic"
    ndcg_k: int = 10
    seed: int = 0
    bagging_fraction: float = 0.8

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.n_trees < 0:
            raise ValueError("n_trees must be >= 0")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not 0 < self.bagging_fraction <= 1:
            raise ValueError("bagging_fraction must be in (0, 1]")
        if self.lambda_l2 < 0 or self.min_child_weight < 0:
            raise ValueError("lambda_l2 and min_child_weight must be non-negative")


# ---------------------------------------------------------------- objectives

def logistic_grad_hess(f, y):
    """Gradient and hessian of log-loss with respect to the raw score ``f``."""
    p = expit(np.asarray(f, dtype=np.float64))
    return p - np.asarray(y, dtype=np.float64), p * (1.0 - p)


def logloss(f, y) -> float:
    f = np.asarray(f, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, f) - np.asarray(y, dtype=np.float64) * f))


def _group_starts(groups) -> np.ndarray:
    return np.r_[0, np.cumsum(groups)[:-1]].astype(np.int64)


def lambdarank_grad_hess(scores, labels, groups, k: int = 10, max_cells: int = 4_000_000):
    """LambdaRank gradients per row.

    For every pair (i, j) in a group with ``label_i > label_j``::

        rho    = 1 / (1 + exp(s_i - s_j))
        delta  = |gain_i - gain_j| * |disc(rank_i) - disc(rank_j)| / IDCG@k
        g_i   -= rho * delta          g_j += rho * delta
        h_i   += rho (1 - rho) delta  h_j += rho (1 - rho) delta

    with ``gain = 2^label - 1``, ``disc(r) = 1 / log2(r + 1)`` for ``r <= k``
    and 0 beyond, and ranks taken from the current scores (ties by row order).
    Groups whose IDCG is 0 contribute nothing.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    groups = np.asarray(groups, dtype=np.int64)
    if np.any(groups < 1):
        raise ValueError("group sizes must be >= 1")
    if np.any(labels < 0):
        raise ValueError("labels must be non-negative")
    g = np.zeros_like(scores)
    h = np.zeros_like(scores)
    starts = _group_starts(groups)
    # process groups of similar size together so padding stays small
    order = np.argsort(groups, kind="stable")
    pos = 0
    while pos < len(order):
        S = int(groups[order[pos]])
        chunk = max(1, max_cells // max(S * S, 1))
        sel = order[pos:pos + chunk]
        S = int(groups[sel].max())
        sel = sel[groups[sel] <= S]
        pos += len(sel)
        _lambdarank_block(scores, labels, starts[sel], groups[sel], S, k, g, h)
    return g, h


def _lambdarank_block(scores, labels, starts, sizes, S, k, g_out, h_out):
    C = len(starts)
    col = np.arange(S)
    valid = col[None, :] < sizes[:, None]
    rows = np.where(valid, starts[:, None] + col[None, :], 0)
    s = np.where(valid, scores[rows], 0.0)
    y = np.where(valid, labels[rows], 0.0)
    gain = np.where(valid, np.exp2(y) - 1.0, 0.0)

    sort_key = np.where(valid, -s, np.inf)
    order = np.argsort(sort_key, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(col + 1, order.shape), axis=1)
    disc_of_rank = np.where(col + 1 <= k, 1.0 / np.log2(col + 2.0), 0.0)
    disc = disc_of_rank[rank - 1]
    ideal = -np.sort(-gain, axis=1)
    idcg = ideal @ disc_of_rank
    inv_idcg = np.divide(1.0, idcg, out=np.zeros_like(idcg), where=idcg > 0)

    pair = (y[:, :, None] > y[:, None, :]) & valid[:, :, None] & valid[:, None, :]
    delta = (np.abs(gain[:, :, None] - gain[:, None, :]) * np.abs(disc[:, :, None] - disc[:, None, :])
             * inv_idcg[:, None, None])
    rho = expit(-(s[:, :, None] - s[:, None, :]))
    lam = np.where(pair, rho * delta, 0.0)
    w = np.where(pair, rho * (1.0 - rho) * delta, 0.0)
    g = lam.sum(axis=1) - lam.sum(axis=2)
    h = w.sum(axis=1) + w.sum(axis=2)
    g_out[rows[valid]] = g[valid]
    h_out[rows[valid]] = h[valid]


# ------------------------------------------------------------------- binning

@dataclass
class BinMapper:
    """Per-feature sorted cut points; ``bin = #edges <= x`` and NaN -> ``n_bins - 1``."""

    n_bins: int
    edges: list[np.ndarray]

    @classmethod
    def fit(cls, X: np.ndarray, n_bins: int) -> "BinMapper":
        edges = []
        for f in range(X.shape[1]):
            v = X[:, f]
            v = v[~np.isnan(v)]
            uniq = np.unique(v)
            if len(uniq) <= 1:
                e = np.zeros(0)
            elif len(uniq) <= n_bins - 1:
                e = 0.5 * (uniq[:-1] + uniq[1:])
            else:
                qs = np.quantile(v, np.linspace(0.0, 1.0, n_bins)[1:-1], method="linear")
                e = np.unique(qs)
                e = e[e > uniq[0]]  # an edge at the minimum would leave bin 0 empty
            edges.append(np.asarray(e[: n_bins - 2], dtype=np.float64))
        return cls(n_bins, edges)

    def transform(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape, dtype=np.int32)
        for f, e in enumerate(self.edges):
            x = X[:, f]
            b = np.searchsorted(e, x, side="right")
            out[:, f] = np.where(np.isnan(x), self.n_bins - 1, b)
        return out

    def threshold_value(self, f: int, t: int) -> float:
        e = self.edges[f]
        return float(e[t]) if t < len(e) else float("inf")


# ------------------------------------------------------------- split search

@dataclass
class SplitChoice:
    feature: int
    threshold: int
    default_left: bool
    gain: float


def _split_gains(Gh, Hh, Ch, lam, mcw):
    """Gain for every (node, feature, threshold, missing-left?) candidate.

    ``Gh``, ``Hh``, ``Ch`` have shape ``(A, F, B)``: gradient, hessian and row
    count histograms with the missing bin last.
    """
    Gv, Hv, Cv = Gh[..., :-1], Hh[..., :-1], Ch[..., :-1]
    Gm, Hm, Cm = Gh[..., -1:], Hh[..., -1:], Ch[..., -1:]
    cG, cH, cC = np.cumsum(Gv, axis=2), np.cumsum(Hv, axis=2), np.cumsum(Cv, axis=2)
    G = Gh.sum(axis=2)[:, :1, None]  # node totals, identical across features
    H = Hh.sum(axis=2)[:, :1, None]
    N = Ch.sum(axis=2)[:, :1, None]
    parent = G * G / (H + lam)
    gains = np.empty(cG.shape + (2,))
    for d, (GL, HL, CL) in enumerate([(cG + Gm, cH + Hm, cC + Cm), (cG, cH, cC)]):
        GR, HR, CR = G - GL, H - HL, N - CL
        gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent)
        ok = (HL >= mcw) & (HR >= mcw) & (CL > 0) & (CR > 0)
        gains[..., d] = np.where(ok, gain, -np.inf)
    return gains  # last axis: 0 = missing goes left, 1 = missing goes right


def best_split(binned, grad, hess, n_bins, lambda_l2=1.0, min_child_weight=1e-3):
    """Best split of one node holding every row of ``binned``; None if no positive gain."""
    F = binned.shape[1]
    key = (binned + np.arange(F) * n_bins).ravel()
    shape = (1, F, n_bins)
    Gh = np.bincount(key, np.repeat(grad, F), F * n_bins).reshape(shape)
    Hh = np.bincount(key, np.repeat(hess, F), F * n_bins).reshape(shape)
    Ch = np.bincount(key, None, F * n_bins).astype(np.float64).reshape(shape)
    gains = _split_gains(Gh, Hh, Ch, lambda_l2, min_child_weight)[0]
    j = int(np.argmax(gains))
    f, t, d = np.unravel_index(j, gains.shape)
    if not gains[f, t, d] > 0:
        return None
    return SplitChoice(int(f), int(t), bool(d == 0), float(gains[f, t, d]))


# --------------------------------------------------------------------- trees

@dataclass
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold_bin: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of raw feature matrix ``X``."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            r, n = rows[inner], node[inner]
            x = X[r, f[inner]]
            go_left = np.where(np.isnan(x), self.default_left[n], x < self.threshold[n])
            node[inner] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


def grow_tree(binned, grad, hess, mapper: BinMapper, params: GbdtParams, sample=None):
    """Depth-wise growth. Returns the tree and the leaf index of every row.

    Histograms use only rows where ``sample`` is true; every row is routed.
    """
    n, F = binned.shape
    B = mapper.n_bins
    lam, mcw = params.lambda_l2, params.min_child_weight
    sample = np.ones(n, dtype=bool) if sample is None else sample
    feature, tbin, default_left, left, right = [-1], [0], [False], [-1], [-1]
    node_of = np.zeros(n, dtype=np.int64)
    frontier = [0]
    offsets = np.arange(F) * B
    for _ in range(params.max_depth):
        if not frontier:
            break
        A = len(frontier)
        lut = np.full(len(feature), -1, dtype=np.int64)
        lut[frontier] = np.arange(A)
        local = lut[node_of]
        rows = np.flatnonzero((local >= 0) & sample)
        key = ((local[rows] * (F * B))[:, None] + offsets[None, :] + binned[rows]).ravel()
        size = A * F * B
        Gh = np.bincount(key, np.repeat(grad[rows], F), size).reshape(A, F, B)
        Hh = np.bincount(key, np.repeat(hess[rows], F), size).reshape(A, F, B)
        Ch = np.bincount(key, None, size).astype(np.float64).reshape(A, F, B)
        gains = _split_gains(Gh, Hh, Ch, lam, mcw).reshape(A, -1)
        best = np.argmax(gains, axis=1)
        next_frontier = []
        split_local = np.full(A, False)
        for a, node in enumerate(frontier):
            if not gains[a, best[a]] > 0:
                continue
            f, t, d = np.unravel_index(best[a], (F, B - 1, 2))
            feature[node], tbin[node], default_left[node] = int(f), int(t), bool(d == 0)
            left[node], right[node] = len(feature), len(feature) + 1
            for _child in range(2):
                feature.append(-1)
                tbin.append(0)
                default_left.append(False)
                left.append(-1)
                right.append(-1)
            next_frontier += [left[node], right[node]]
            split_local[a] = True
        # route every row of a split node to a child
        moving = np.flatnonzero((local >= 0) & split_local[np.maximum(local, 0)])
        if len(moving):
            nd = node_of[moving]
            f = np.asarray(feature)[nd]
            b = binned[moving, f]
            is_missing = b == B - 1
            go_left = np.where(is_missing, np.asarray(default_left)[nd], b <= np.asarray(tbin)[nd])
            node_of[moving] = np.where(go_left, np.asarray(left)[nd], np.asarray(right)[nd])
        frontier = next_frontier
    feature = np.asarray(feature, dtype=np.int64)
    n_nodes = len(feature)
    Gs = np.bincount(node_of[sample], grad[sample], n_nodes)
    Hs = np.bincount(node_of[sample], hess[sample], n_nodes)
    value = np.where(feature < 0, -Gs / (Hs + lam), 0.0)
    tbin = np.asarray(tbin, dtype=np.int64)
    thr = np.array([mapper.threshold_value(int(f), int(t)) if f >= 0 else 0.0
                    for f, t in zip(feature, tbin)], dtype=np.float64)
    tree = Tree(feature, tbin, thr, np.asarray(default_left, dtype=bool),
                np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64), value)
    return tree, node_of


# --------------------------------------------------------------------- model

@dataclass
class GbdtModel:
    params: GbdtParams
    feature_names: list[str]
    base_score: float
    trees: list[Tree] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)

    def _matrix(self, X, feature_names=None) -> np.ndarray:
        if feature_names is None:
            X = np.asarray(X, dtype=np.float64)
            if X.shape[1] != len(self.feature_names):
                raise ValueError(f"expected {len(self.feature_names)} columns, got {X.shape[1]}")
            return X
        pos = {c: k for k, c in enumerate(feature_names)}
        missing = [c for c in self.feature_names if c not in pos]
        if missing:
            raise KeyError(f"matrix lacks trained columns {missing}")
        return np.asarray(X, dtype=np.float64)[:, [pos[c] for c in self.feature_names]]

    def predict(self, X, feature_names=None) -> np.ndarray:
        """Raw margin ``base_score + lr * sum(tree leaves)``."""
        X = self._matrix(X, feature_names)
        out = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            out += self.params.learning_rate * tree.predict(X)
        return out

    def save(self, path, provenance: str | None = None) -> None:
        sizes = np.array([t.n_nodes for t in self.trees], dtype=np.int64)

        def cat(attr, dtype):
            parts = [getattr(t, attr).astype(dtype) for t in self.trees]
            return np.concatenate(parts) if parts else np.zeros(0, dtype)

        meta = {"kind": "gbdt", "params": asdict(self.params), "feature_names": list(self.feature_names),
                "base_score": float(self.base_score), "loss_history": [float(v) for v in self.loss_history]}
        if provenance is not None:
            meta["provenance"] = provenance
        arrays = {"tree_sizes": sizes, "feature": cat("feature", "<i8"),
                  "threshold_bin": cat("threshold_bin", "<i8"), "threshold": cat("threshold", "<f8"),
                  "default_left": cat("default_left", "u1"), "left": cat("left", "<i8"),
                  "right": cat("right", "<i8"), "value": cat("value", "<f8")}
        write_container(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "GbdtModel":
        meta, a = read_container(path)
        if meta.get("kind") != "gbdt":
            raise ValueError(f"{path} is not a gbdt model file")
        trees, start = [], 0
        for n in a["tree_sizes"].tolist():
            sl = slice(start, start + n)
            trees.append(Tree(a["feature"][sl].astype(np.int64), a["threshold_bin"][sl].astype(np.int64),
                              a["threshold"][sl].astype(np.float64), a["default_left"][sl].astype(bool),
                              a["left"][sl].astype(np.int64), a["right"][sl].astype(np.int64),
                              a["value"][sl].astype(np.float64)))
            start += n
        return cls(GbdtParams(**meta["params"]), meta["feature_names"], meta["base_score"], trees,
                   meta["loss_history"])


def fit(X, y, params: GbdtParams, groups=None, feature_names=None) -> GbdtModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("cannot fit on an empty matrix")
    if len(y) != X.shape[0]:
        raise ValueError("labels must align with rows")
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(X.shape[1])]
    ranking = params.objective == "pairwise_lambdarank"
    if ranking:
        if groups is None:
            raise ValueError("pairwise objective needs group sizes")
        groups = np.asarray(groups, dtype=np.int64)
        if groups.sum() != len(y):
            raise ValueError("group sizes must sum to the row count")
        base = 0.0
    else:
        if np.any((y < 0) | (y > 1)):
            raise ValueError("logistic labels must be in [0, 1]")
        p = float(np.clip(y.mean(), _PROB_CLIP, 1 - _PROB_CLIP))
        base = float(np.log(p / (1 - p)))
    model = GbdtModel(params, names, base)
    if not ranking and np.all(y == y[0]):
        logger.info("constant labels: model holds the base score only")
        return model

    mapper = BinMapper.fit(X, params.n_bins)
    binned = mapper.transform(X)
    rng = np.random.default_rng(params.seed)
    f = np.full(len(y), base)
    if not ranking:
        model.loss_history.append(logloss(f, y))
    for _ in range(params.n_trees):
        if ranking:
            g, h = lambdarank_grad_hess(f, y, groups, params.ndcg_k)
        else:
            g, h = logistic_grad_hess(f, y)
        sample = None
        if params.bagging_fraction < 1:
            sample = rng.random(len(y)) < params.bagging_fraction
        tree, leaf_of = grow_tree(binned, g, h, mapper, params, sample)
        if tree.n_nodes == 1:
            logger.info("no split with positive gain after %d trees; stopping", len(model.trees))
            break
        model.trees.append(tree)
        f += params.learning_rate * tree.value[leaf_of]
        if not ranking:
            model.loss_history.append(logloss(f, y))
    return model


# ----------------------------------------------------------------- estimator

class GradientBoostedTrees(BaseEstimator):
    """sklearn-style wrapper around :func:`fit` / :meth:`GbdtModel.predict`."""

    def __init__(self, n_trees=300, learning_rate=0.05, max_depth=6, min_child_weight=1e-3, n_bins=64,
                 lambda_l2=1.0, objective="pointwise_logistic", ndcg_k=10, seed=0, bagging_fraction=0.8):
        self.n_trees = n_trees
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.min_child_weight = min_child_weight
        self.n_bins = n_bins
        self.lambda_l2 = lambda_l2
        self.objective = objective
        self.ndcg_k = ndcg_k
        self.seed = seed
        self.bagging_fraction = bagging_fraction

    def to_params(self) -> GbdtParams:
        return GbdtParams(**self.get_params())

    def fit(self, X, y, group=None, feature_names=None):
        X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan")
        self.model_ = fit(X, y, self.to_params(), group, feature_names)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, feature_names=None):
        check_is_fitted(self, "model_")
        return self.model_.predict(X, feature_names)


# -------------------------------------------------------------------- k-fold

def _hash_key(key: str) -> str:
    return hashlib.sha1(key.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("K must be >= 2")

    @classmethod
    def by_hash(cls, keys, k: int = 5) -> "FoldPlan":
        """Order groups by SHA-1 of their key and deal them round-robin into folds."""
        keys = list(keys)
        if len(set(keys)) != len(keys):
            raise ValueError("group keys must be unique")
        if k > len(keys):
            raise ValueError(f"K={k} exceeds the number of groups ({len(keys)})")
        ordered = sorted(keys, key=lambda s: (_hash_key(s), s))
        return cls(k, {key: pos % k for pos, key in enumerate(ordered)})

    def fold_of_rows(self, keys, groups) -> np.ndarray:
        missing = [g for g in keys if g not in self.assignment]
        if missing:
            raise ValueError(f"fold plan does not cover groups {missing[:5]}")
        return np.repeat([self.assignment[g] for g in keys], groups)


def kfold_train(X, y, keys, groups, plan: FoldPlan, params: GbdtParams, X_test=None,
                feature_names=None, return_models: bool = False):
    """Out-of-fold scores for every row and test scores averaged over the K models."""
    groups = np.asarray(groups, dtype=np.int64)
    keys = list(keys)
    if plan.k > len(keys):
        raise ValueError(f"K={plan.k} exceeds the number of groups ({len(keys)})")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    fold = plan.fold_of_rows(keys, groups)
    group_fold = np.array([plan.assignment[g] for g in keys])
    oof = np.full(len(y), np.nan)
    test = np.zeros(0 if X_test is None else len(X_test))
    models = []
    for k in range(plan.k):
        tr = fold != k
        if not np.any(~tr):
            logger.warning("fold %d holds no groups", k)
        model = fit(X[tr], y[tr], params, groups[group_fold != k], feature_names)
        models.append(model)
        if np.any(~tr):
            oof[~tr] = model.predict(X[~tr])
        if X_test is not None:
            test += model.predict(X_test) / plan.k
        logger.info("fold %d/%d trained rows=%d held_out=%d", k + 1, plan.k, int(tr.sum()), int((~tr).sum()))
    return (oof, test, models) if return_models else (oof, test)
