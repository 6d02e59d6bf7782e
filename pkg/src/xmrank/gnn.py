"""Ranking-augmented graph neural ranker.

Pipeline for one forward pass over the (M+N)-node target-market graph::

    X_{l+1} = A_hat X_l + X_l * (A_hat X_l)        (l = 0..L-1)
    X_bar   = mean(X_0, ..., X_L)
    X_tilde = row-wise L2 normalisation of X_bar
    y_hat   = sigmoid(h . (e_u * e_i) + MLP([e_u, e_i]))

``A_hat = D^-1/2 A D^-1/2`` with rating-derived edge weights and no self
loops. Training minimises label-smoothed binary cross-entropy over groups of
one observed interaction plus sampled unobserved items. Gradients are
derived by hand (see :func:`loss_and_grad`); there is no autodiff dependency.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._binio import read_container, write_container
from .dataset_io import CandidateLists, IdMaps, InteractionIndex
from .scores import ScoreList

logger = logging.getLogger(__name__)

_NORM_EPS = 1e-12


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


def edge_weight(rating, divisor: float = 10.0):
    """Map a rating to an edge weight: ``((r / divisor) + 0.5) * 0.95 + 0.05 / 2``."""
    return ((np.asarray(rating, dtype=np.float64) / divisor) + 0.5) * 0.95 + 0.05 / 2


@dataclass(frozen=True)
class WeightedBipartiteGraph:
    norm_adj: sp.csr_matrix
    degree: np.ndarray
    n_users: int
    n_items: int

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items


def normalize_adjacency(A: sp.spmatrix) -> tuple[sp.csr_matrix, np.ndarray]:
    A = sp.csr_matrix(A)
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = deg[nz] ** -0.5
    coo = A.tocoo()
    # inv[r] * inv[c] is commutative, so the result is exactly symmetric
    vals = coo.data * (inv_sqrt[coo.row] * inv_sqrt[coo.col])
    norm = sp.csr_matrix((vals, (coo.row, coo.col)), shape=A.shape)
    norm.sort_indices()
    return norm, deg


def build_graph(index: InteractionIndex, divisor: float = 10.0) -> WeightedBipartiteGraph:
    m = index.user_items
    W = sp.csr_matrix((edge_weight(m.data, divisor), m.indices, m.indptr), shape=m.shape)
    A = sp.bmat([[None, W], [W.T, None]], format="csr")
    norm, deg = normalize_adjacency(A)
    return WeightedBipartiteGraph(norm, deg, index.n_users, index.n_items)


def _adj(graph) -> sp.csr_matrix:
    return graph.norm_adj if isinstance(graph, WeightedBipartiteGraph) else graph


def propagate(graph, X0: np.ndarray, n_layers: int) -> list[np.ndarray]:
    """Return ``[X_0, ..., X_L]``; one sparse product per layer feeds both terms."""
    if n_layers < 0:
        raise ValueError("n_layers must be >= 0")
    A = _adj(graph)
    layers = [X0]
    for _ in range(n_layers):
        X = layers[-1]
        AX = A @ X
        layers.append(AX + X * AX)
    return layers


def pool_normalize(layers: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Mean over layers, then unit rows. Returns ``(X_bar, X_tilde)``."""
    if not layers:
        raise ValueError("need at least one layer")
    X_bar = np.mean(np.stack(layers), axis=0)
    norms = np.linalg.norm(X_bar, axis=1, keepdims=True)
    # NaN norms fail the comparison and propagate, so divergence stays visible
    X_tilde = np.divide(X_bar, norms, out=np.zeros_like(X_bar), where=~(norms <= _NORM_EPS))
    return X_bar, X_tilde


@dataclass
class FusionHead:
    """GMF weight ``h`` plus an MLP ``2d -> hidden... -> 1`` with ReLU between."""

    h: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def dim(self) -> int:
        return self.h.shape[0]

    @classmethod
    def init(cls, dim: int, mlp_sizes, rng) -> "FusionHead":
        sizes = [2 * dim, *mlp_sizes, 1]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        h = rng.uniform(-1.0 / np.sqrt(dim), 1.0 / np.sqrt(dim), size=dim)
        return cls(h, weights, biases)

    @classmethod
    def zeros(cls, dim: int, mlp_sizes) -> "FusionHead":
        sizes = [2 * dim, *mlp_sizes, 1]
        return cls(np.zeros(dim), [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(b) for b in sizes[1:]])

    def parameters(self) -> list[np.ndarray]:
        return [self.h, *self.weights, *self.biases]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def head_forward(head: FusionHead, E_u: np.ndarray, E_i: np.ndarray):
    """Pre-sigmoid logits for a batch, plus the cache needed by :func:`head_backward`."""
    if E_u.shape != E_i.shape or E_u.shape[-1] != head.dim:
        raise ValueError(f"embedding dims {E_u.shape}/{E_i.shape} do not match head dim {head.dim}")
    gmf = (E_u * E_i) @ head.h
    a = np.concatenate([E_u, E_i], axis=1)
    acts = [a]
    pre = []
    n = len(head.weights)
    for k, (W, b) in enumerate(zip(head.weights, head.biases)):
        z = acts[-1] @ W + b
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if k < n - 1 else z)
    z = gmf + acts[-1][:, 0]
    return z, (E_u, E_i, acts, pre)


def head_backward(head: FusionHead, cache, dz: np.ndarray):
    """Backprop ``dL/dz`` into head parameters and both embedding batches."""
    E_u, E_i, acts, pre = cache
    g_h = (E_u * E_i).T @ dz
    dEu = dz[:, None] * head.h[None, :] * E_i
    dEi = dz[:, None] * head.h[None, :] * E_u
    n = len(head.weights)
    g_w = [None] * n
    g_b = [None] * n
    delta = dz[:, None]
    for k in range(n - 1, -1, -1):
        if k < n - 1:
            delta = delta * (pre[k] > 0)
        g_w[k] = acts[k].T @ delta
        g_b[k] = delta.sum(axis=0)
        delta = delta @ head.weights[k].T
    d = head.dim
    dEu += delta[:, :d]
    dEi += delta[:, d:]
    return FusionHead(g_h, g_w, g_b), dEu, dEi


def predict_pair(e_u, e_i, head: FusionHead) -> float:
    e_u = np.asarray(e_u, dtype=np.float64).reshape(1, -1)
    e_i = np.asarray(e_i, dtype=np.float64).reshape(1, -1)
    z, _ = head_forward(head, e_u, e_i)
    return float(_sigmoid(z[0]))


def smooth_targets(is_positive, rating, r_max: float, eps: float = 0.1, eps_neg_scale: float = 0.5):
    """Rating-aware label smoothing.

    Positives: ``1 - eps * (1 - rating / r_max)`` so a top-rated interaction
    keeps target 1. Unobserved items: ``eps * eps_neg_scale``.
    """
    if not 0 <= eps < 0.5:
        raise ValueError(f"eps must be in [0, 0.5), got {eps}")
    is_positive = np.asarray(is_positive, dtype=bool)
    rating = np.asarray(rating, dtype=np.float64)
    frac = np.clip(rating / r_max, 0.0, 1.0) if r_max > 0 else np.ones_like(rating)
    return np.where(is_positive, 1.0 - eps * (1.0 - frac), eps * eps_neg_scale)


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise ``-(y log s(z) + (1-y) log(1-s(z)))`` in a stable form."""
    return np.logaddexp(0.0, z) - y * z


@dataclass
class GnnParams:
    X0: np.ndarray
    head: FusionHead

    def arrays(self) -> list[np.ndarray]:
        return [self.X0, *self.head.parameters()]


def forward(params: GnnParams, graph, n_layers: int):
    layers = propagate(graph, params.X0, n_layers)
    X_bar, X_tilde = pool_normalize(layers)
    return layers, X_bar, X_tilde


def loss_and_grad(params: GnnParams, graph, n_layers: int, users: np.ndarray, items: np.ndarray,
                  targets: np.ndarray, n_users: int):
    """Mean cross-entropy over the pairs and its gradient w.r.t. every parameter.

    ``users`` and ``items`` are dense ids; item node ids are ``n_users + item``.
    """
    A = _adj(graph)
    layers, X_bar, X_tilde = forward(params, A, n_layers)
    nodes_i = items + n_users
    z, cache = head_forward(params.head, X_tilde[users], X_tilde[nodes_i])
    B = len(z)
    loss = float(bce_with_logits(z, targets).mean())
    dz = (_sigmoid(z) - targets) / B
    g_head, dEu, dEi = head_backward(params.head, cache, dz)

    G_tilde = np.zeros_like(X_tilde)
    np.add.at(G_tilde, users, dEu)
    np.add.at(G_tilde, nodes_i, dEi)

    norms = np.linalg.norm(X_bar, axis=1, keepdims=True)
    ok = ~(norms <= _NORM_EPS)
    radial = np.sum(X_tilde * G_tilde, axis=1, keepdims=True)
    G_bar = np.divide(G_tilde - X_tilde * radial, norms, out=np.zeros_like(G_tilde), where=ok)

    share = G_bar / (n_layers + 1)
    G = share.copy()
    # reverse through X_{l+1} = AX_l + X_l * AX_l; A_hat is symmetric
    for l in range(n_layers - 1, -1, -1):
        X = layers[l]
        AX = A @ X
        dAX = G * (1.0 + X)
        G = share + G * AX + A.T @ dAX
    return loss, GnnParams(G, g_head)


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class GnnModel:
    ids: IdMaps
    params: GnnParams
    n_layers: int
    X_tilde: np.ndarray
    hyper: dict = field(default_factory=dict)
    loss_history: list[float] = field(default_factory=list)

    @property
    def n_users(self) -> int:
        return self.ids.n_users

    def predict(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        z, _ = head_forward(self.params.head, self.X_tilde[users], self.X_tilde[items + self.n_users])
        return _sigmoid(z)

    def save(self, path, provenance: str | None = None) -> None:
        head = self.params.head
        arrays = {"X0": self.params.X0, "X_tilde": self.X_tilde, "h": head.h}
        for k, (W, b) in enumerate(zip(head.weights, head.biases)):
            arrays[f"W{k}"] = W
            arrays[f"b{k}"] = b
        meta = {"kind": "gnn", "hyper": self.hyper, "n_layers": self.n_layers,
                "n_mlp": len(head.weights), "loss_history": self.loss_history,
                "user_ids": list(self.ids.user_ids), "item_ids": list(self.ids.item_ids)}
        if provenance is not None:
            meta["provenance"] = provenance
        write_container(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "GnnModel":
        meta, arr = read_container(path)
        if meta.get("kind") != "gnn":
            raise ValueError(f"{path} is not a GNN checkpoint")
        n = meta["n_mlp"]
        head = FusionHead(arr["h"], [arr[f"W{k}"] for k in range(n)], [arr[f"b{k}"] for k in range(n)])
        ids = IdMaps(tuple(meta["user_ids"]), tuple(meta["item_ids"]))
        return cls(ids, GnnParams(arr["X0"], head), meta["n_layers"], arr["X_tilde"],
                   meta["hyper"], meta["loss_history"])


def _history_keys(index: InteractionIndex) -> np.ndarray:
    m = index.user_items
    rows = np.repeat(np.arange(m.shape[0], dtype=np.int64), np.diff(m.indptr))
    return rows * index.n_items + m.indices


def sample_negatives(index: InteractionIndex, users: np.ndarray, n_neg: int, rng,
                     keys: np.ndarray | None = None) -> np.ndarray:
    """Uniform items the user has not interacted with (with replacement)."""
    if keys is None:
        keys = _history_keys(index)
    N = index.n_items
    out = rng.integers(0, N, size=(len(users), n_neg))
    while True:
        flat = users[:, None] * N + out
        pos = np.searchsorted(keys, flat)
        bad = (pos < len(keys)) & (keys[np.minimum(pos, len(keys) - 1)] == flat)
        if not bad.any():
            return out
        out[bad] = rng.integers(0, N, size=int(bad.sum()))


def build_batch(index: InteractionIndex, pos_users, pos_items, pos_ratings, n_neg: int, rng,
                eps: float, eps_neg_scale: float, keys=None):
    """Each positive followed by its ``n_neg`` negatives: groups of ``1 + n_neg`` rows."""
    neg = sample_negatives(index, pos_users, n_neg, rng, keys)
    g = 1 + n_neg
    users = np.repeat(pos_users, g)
    items = np.concatenate([pos_items[:, None], neg], axis=1).ravel()
    is_pos = np.zeros((len(pos_users), g), dtype=bool)
    is_pos[:, 0] = True
    ratings = np.repeat(pos_ratings, g)
    targets = smooth_targets(is_pos.ravel(), ratings, index.r_max, eps, eps_neg_scale)
    return users, items, targets


DEFAULTS = dict(dim=64, n_layers=3, mlp_sizes=(64, 32), lr=1e-3, epochs=30, eps=0.1,
                eps_neg_scale=0.5, n_negatives=99, batch_size=256, rating_divisor=10.0,
                init_std=0.1, seed=0)


def train_gnn(index: InteractionIndex, dim=64, n_layers=3, mlp_sizes=(64, 32), lr=1e-3, epochs=30,
              eps=0.1, eps_neg_scale=0.5, n_negatives=99, batch_size=256, rating_divisor=10.0,
              init_std=0.1, seed=0, callback=None) -> GnnModel:
    """Train on the (target-market) index with Adam; deterministic per seed.

    ``loss_history[0]`` is the loss at initialisation on the first epoch's
    samples; entry ``e`` is the mean training loss of epoch ``e``.
    ``callback(epoch, model)`` runs after every epoch.
    """
    hyper = dict(dim=dim, n_layers=n_layers, mlp_sizes=list(mlp_sizes), lr=lr, epochs=epochs,
                 eps=eps, eps_neg_scale=eps_neg_scale, n_negatives=n_negatives,
                 batch_size=batch_size, rating_divisor=rating_divisor, init_std=init_std, seed=seed)
    rng = np.random.default_rng(seed)
    graph = build_graph(index, rating_divisor)
    A = graph.norm_adj
    X0 = rng.normal(0.0, init_std, size=(graph.n_nodes, dim))
    params = GnnParams(X0, FusionHead.init(dim, mlp_sizes, rng))
    opt = Adam(params.arrays(), lr=lr)

    m = index.user_items
    pos_users = np.repeat(np.arange(index.n_users, dtype=np.int64), np.diff(m.indptr))
    pos_items = m.indices.astype(np.int64)
    pos_ratings = m.data.astype(np.float64)
    full = np.diff(m.indptr)[pos_users] >= index.n_items
    if full.any():
        logger.warning("GNN: skipping %d interactions of users with no unobserved items", int(full.sum()))
        pos_users, pos_items, pos_ratings = pos_users[~full], pos_items[~full], pos_ratings[~full]
    if len(pos_users) == 0:
        raise ValueError("no trainable interactions")
    keys = _history_keys(index)

    history: list[float] = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(pos_users))
        batches = []
        for start in range(0, len(order), batch_size):
            sel = order[start:start + batch_size]
            batches.append(build_batch(index, pos_users[sel], pos_items[sel], pos_ratings[sel],
                                       n_negatives, rng, eps, eps_neg_scale, keys))
        if epoch == 1:
            history.append(_mean_loss(params, A, n_layers, batches, index.n_users))
        total, count = 0.0, 0
        for step, (u, i, y) in enumerate(batches):
            loss, grads = loss_and_grad(params, A, n_layers, u, i, y, index.n_users)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.arrays()):
                raise TrainingDivergedError(
                    f"non-finite loss/gradient at epoch {epoch}, step {step} (lr={lr}, dim={dim}, "
                    f"layers={n_layers}); last finite mean loss {total / max(count, 1):.6g}")
            opt.step(grads.arrays())
            total += loss * len(y)
            count += len(y)
        history.append(total / count)
        logger.info("GNN epoch %d/%d: mean loss %.6f", epoch, epochs, history[-1])
        if callback is not None:
            _, _, X_tilde = forward(params, A, n_layers)
            callback(epoch, GnnModel(index.ids, params, n_layers, X_tilde, hyper, history))
    _, _, X_tilde = forward(params, A, n_layers)
    return GnnModel(index.ids, params, n_layers, X_tilde, hyper, history)


def _mean_loss(params, A, n_layers, batches, n_users) -> float:
    _, _, X_tilde = forward(params, A, n_layers)
    total, count = 0.0, 0
    for u, i, y in batches:
        z, _ = head_forward(params.head, X_tilde[u], X_tilde[i + n_users])
        total += float(bce_with_logits(z, y).sum())
        count += len(y)
    return total / count


def score_candidates_gnn(model: GnnModel, run: CandidateLists, name: str = "gnn") -> ScoreList:
    """Scores for every run pair; unknown users or items score 0."""
    ids = model.ids
    users, items, keys = [], [], []
    scores = {}
    for user, cands in run.entries:
        u = ids.user_to_dense.get(user)
        for c in cands:
            i = ids.item_to_dense.get(c)
            if u is None or i is None:
                scores[(user, c)] = 0.0
            else:
                users.append(u)
                items.append(i)
                keys.append((user, c))
    if keys:
        probs = model.predict(np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64))
        for k, p in zip(keys, probs.tolist()):
            scores[k] = p
    return ScoreList(name, scores)


class GnnRanker(BaseEstimator):
    """Estimator wrapper around :func:`train_gnn` / :func:`score_candidates_gnn`."""

    name = "gnn"

    def __init__(self, dim=64, n_layers=3, mlp_sizes=(64, 32), lr=1e-3, epochs=30, eps=0.1,
                 eps_neg_scale=0.5, n_negatives=99, batch_size=256, rating_divisor=10.0,
                 init_std=0.1, seed=0):
        self.dim = dim
        self.n_layers = n_layers
        self.mlp_sizes = mlp_sizes
        self.lr = lr
        self.epochs = epochs
        self.eps = eps
        self.eps_neg_scale = eps_neg_scale
        self.n_negatives = n_negatives
        self.batch_size = batch_size
        self.rating_divisor = rating_divisor
        self.init_std = init_std
        self.seed = seed

    def fit(self, index: InteractionIndex, y=None, callback=None):
        self.model_ = train_gnn(index, callback=callback, **self.get_params())
        return self

    def predict(self, users, items) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.predict(np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64))

    def score(self, run: CandidateLists) -> ScoreList:
        check_is_fitted(self, "model_")
        return score_candidates_gnn(self.model_, run, self.name)
