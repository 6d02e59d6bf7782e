"""User/item embedding families: TF-IDF + truncated SVD, word2vec, DeepWalk.

The two sequence models share one skip-gram-with-negative-sampling trainer
working on a joint node space where users are ``0..M-1`` and items
``M..M+N-1``. Output is always a pair of :class:`EmbeddingTable` (users,
items) whose rows follow the dense ids of the index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.extmath import randomized_svd
from sklearn.utils.validation import check_is_fitted

from ._binio import read_container, write_container
from .dataset_io import IdMaps, InteractionIndex

METHODS = ("tfidf_svd", "word2vec", "deepwalk")


@dataclass
class EmbeddingTable:
    method: str
    entity: str
    vectors: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown embedding method {self.method!r}")
        if self.entity not in ("user", "item"):
            raise ValueError(f"entity must be 'user' or 'item', got {self.entity!r}")
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a 2-d matrix")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding contains non-finite values")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def save(self, path, provenance: str | None = None) -> None:
        meta = {"method": self.method, "entity": self.entity, "rows": len(self),
                "dim": self.dim, "seed": int(self.seed)}
        if provenance is not None:
            meta["provenance"] = provenance
        write_container(path, meta, {"vectors": self.vectors.astype("<f4")})

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        meta, arrays = read_container(path)
        return cls(meta["method"], meta["entity"], arrays["vectors"].astype(np.float64), meta["seed"])

    def export_tsv(self, path, ids: IdMaps) -> None:
        names = ids.user_ids if self.entity == "user" else ids.item_ids
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for name, row in zip(names, self.vectors.astype(np.float32)):
                fh.write(name + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


@dataclass
class WalkCorpus:
    sequences: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def n_tokens(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    def concat(self, other: "WalkCorpus") -> "WalkCorpus":
        return WalkCorpus(self.sequences + other.sequences)

    def shifted(self, offset: int) -> "WalkCorpus":
        return WalkCorpus([s + offset for s in self.sequences])


def user_sequences(index: InteractionIndex) -> WalkCorpus:
    """Each user's item ids in stored (dense id) order, one sentence per user."""
    m = index.user_items
    return WalkCorpus([m.indices[m.indptr[u]:m.indptr[u + 1]].copy()
                       for u in range(index.n_users) if m.indptr[u + 1] > m.indptr[u]])


def item_sequences(index: InteractionIndex) -> WalkCorpus:
    m = index.item_users
    return WalkCorpus([m.indices[m.indptr[i]:m.indptr[i + 1]].copy()
                       for i in range(index.n_items) if m.indptr[i + 1] > m.indptr[i]])


def bipartite_adjacency(index: InteractionIndex) -> sp.csr_matrix:
    B = index.binary()
    A = sp.bmat([[None, B], [B.T, None]], format="csr")
    A.sort_indices()
    return A


def generate_walks(index: InteractionIndex, num_walks: int = 10, walk_len: int = 40,
                   seed: int = 0) -> WalkCorpus:
    """Uniform truncated random walks from every node of the bipartite graph.

    Walks are emitted round by round (``num_walks`` rounds, each covering all
    ``M+N`` start nodes in id order). A walk stops early only at an isolated
    node.
    """
    if num_walks < 1 or walk_len < 1:
        raise ValueError("num_walks and walk_len must be >= 1")
    A = bipartite_adjacency(index)
    indptr, indices = A.indptr, A.indices
    deg = np.diff(indptr)
    n = A.shape[0]
    rng = np.random.default_rng(seed)
    sequences = []
    for _ in range(num_walks):
        walks = np.empty((n, walk_len), dtype=np.int64)
        walks[:, 0] = np.arange(n)
        alive = np.ones(n, dtype=bool)
        length = np.full(n, walk_len)
        for step in range(1, walk_len):
            cur = walks[:, step - 1]
            d = deg[cur]
            stuck = alive & (d == 0)
            length[stuck] = step
            alive &= ~stuck
            pick = (rng.random(n) * np.maximum(d, 1)).astype(np.int64)
            nxt = indices[np.minimum(indptr[cur] + pick, len(indices) - 1)] if len(indices) else cur
            walks[:, step] = np.where(alive, nxt, cur)
        sequences.extend(walks[k, :length[k]].copy() for k in range(n))
    return WalkCorpus(sequences)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def sgns_loss_and_grad(w_in, w_out, centers, contexts, negatives):
    """Summed SGNS loss and per-row gradients for one batch.

    loss = sum_b [ -log s(v_c . u_o) - sum_k log s(-v_c . u_nk) ]

    Returns ``(loss, g_center, g_context, g_negative)`` with shapes
    ``(B, d)``, ``(B, d)``, ``(B, K, d)``; callers scatter-add them.
    """
    v = w_in[centers]
    u_pos = w_out[contexts]
    u_neg = w_out[negatives]
    pos = np.einsum("bd,bd->b", v, u_pos)
    neg = np.einsum("bd,bkd->bk", v, u_neg)
    loss = float(-(_log_sigmoid(pos).sum() + _log_sigmoid(-neg).sum()))
    g_pos = _sigmoid(pos) - 1.0
    g_neg = _sigmoid(neg)
    g_center = g_pos[:, None] * u_pos + np.einsum("bk,bkd->bd", g_neg, u_neg)
    g_context = g_pos[:, None] * v
    g_negative = g_neg[:, :, None] * v[:, None, :]
    return loss, g_center, g_context, g_negative


def _skipgram_pairs(corpus: WalkCorpus, window: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Center/context pairs with word2vec's per-center random window shrink."""
    if not corpus.sequences:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    tokens = np.concatenate(corpus.sequences)
    seq_id = np.repeat(np.arange(len(corpus)), [len(s) for s in corpus.sequences])
    reach = rng.integers(1, window + 1, size=len(tokens))
    centers, contexts = [], []
    for off in range(1, window + 1):
        a = np.arange(len(tokens) - off)
        b = a + off
        same = seq_id[a] == seq_id[b]
        fwd = same & (reach[a] >= off)
        bwd = same & (reach[b] >= off)
        centers += [tokens[a[fwd]], tokens[b[bwd]]]
        contexts += [tokens[b[fwd]], tokens[a[bwd]]]
    return np.concatenate(centers), np.concatenate(contexts)


def noise_distribution(corpus: WalkCorpus, n_tokens: int, power: float = 0.75) -> np.ndarray:
    counts = np.bincount(np.concatenate(corpus.sequences), minlength=n_tokens).astype(np.float64)
    p = counts ** power
    return p / p.sum()


def sgns_corpus_loss(w_in, w_out, corpus: WalkCorpus, window: int, negatives: int,
                     seed: int = 12345) -> float:
    """Mean per-pair loss on a fixed, seeded sample of pairs and negatives."""
    rng = np.random.default_rng(seed)
    c, o = _skipgram_pairs(corpus, window, rng)
    cdf = np.cumsum(noise_distribution(corpus, w_in.shape[0]))
    neg = np.minimum(np.searchsorted(cdf, rng.random((len(c), negatives)) * cdf[-1], side="right"),
                     len(cdf) - 1)
    loss, *_ = sgns_loss_and_grad(w_in, w_out, c, o, neg)
    return loss / max(len(c), 1)


def train_sgns(corpus: WalkCorpus, n_tokens: int, dim: int = 64, window: int = 5,
               negatives: int = 5, epochs: int = 5, lr: float = 0.025, seed: int = 0,
               batch_size: int = 512, min_lr_ratio: float = 1e-4):
    """Skip-gram with negative sampling by mini-batch SGD.

    Learning rate decays linearly from ``lr`` to ``lr * min_lr_ratio`` over
    the training run; pairs are regenerated and shuffled every epoch. Returns ``(w_in, w_out)``; the input side is the
    embedding.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if corpus.n_tokens == 0:
        raise ValueError("corpus is empty")
    rng = np.random.default_rng(seed)
    w_in = (rng.random((n_tokens, dim)) - 0.5) / dim
    w_out = np.zeros((n_tokens, dim))
    cdf = np.cumsum(noise_distribution(corpus, n_tokens))
    for epoch in range(epochs):
        centers, contexts = _skipgram_pairs(corpus, window, rng)
        order = rng.permutation(len(centers))
        centers, contexts = centers[order], contexts[order]
        n_pairs = max(len(centers), 1)
        for start in range(0, len(centers), batch_size):
            c = centers[start:start + batch_size]
            o = contexts[start:start + batch_size]
            neg = np.minimum(np.searchsorted(cdf, rng.random((len(c), negatives)) * cdf[-1],
                                             side="right"), n_tokens - 1)
            progress = (epoch + start / n_pairs) / epochs
            step = lr * max(min_lr_ratio, 1.0 - progress)
            _, g_c, g_o, g_n = sgns_loss_and_grad(w_in, w_out, c, o, neg)
            np.add.at(w_in, c, -step * g_c)
            np.add.at(w_out, o, -step * g_o)
            np.add.at(w_out, neg.ravel(), -step * g_n.reshape(-1, dim))
    return w_in, w_out


def tfidf_matrix(index: InteractionIndex) -> sp.csr_matrix:
    """M x N matrix with tf = 1 per interaction and idf_i = ln(M / df_i)."""
    B = index.binary()
    df = index.item_degree().astype(np.float64)
    idf = np.zeros_like(df)
    nz = df > 0
    idf[nz] = np.log(index.n_users / df[nz])
    return sp.csr_matrix(B @ sp.diags(idf))


def truncated_svd(X, dim: int, seed: int = 0, n_oversamples: int = 10, n_iter: int = 2):
    if dim > min(X.shape):
        raise ValueError(f"dim={dim} exceeds min(shape)={min(X.shape)}")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return randomized_svd(X, dim, n_oversamples=n_oversamples, n_iter=n_iter, random_state=seed)


def tfidf_svd(index: InteractionIndex, dim: int = 64, seed: int = 0):
    """One SVD of the TF-IDF matrix: users get ``U S``, items get ``V S``."""
    U, s, Vt = truncated_svd(tfidf_matrix(index), dim, seed)
    return (EmbeddingTable("tfidf_svd", "user", U * s, seed),
            EmbeddingTable("tfidf_svd", "item", Vt.T * s, seed))


def _split(method, vectors, n_users, seed):
    return (EmbeddingTable(method, "user", vectors[:n_users], seed),
            EmbeddingTable(method, "item", vectors[n_users:], seed))


class _Embedder(BaseEstimator):
    method = ""

    def transform(self, dense_ids, entity: str = "user") -> np.ndarray:
        check_is_fitted(self, "user_table_")
        table = self.user_table_ if entity == "user" else self.item_table_
        return table.vectors[np.asarray(dense_ids, dtype=np.int64)]

    @property
    def tables(self) -> tuple[EmbeddingTable, EmbeddingTable]:
        check_is_fitted(self, "user_table_")
        return self.user_table_, self.item_table_


class TfidfSvd(_Embedder):
    method = "tfidf_svd"

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def fit(self, index: InteractionIndex, y=None):
        dim = min(self.dim, index.n_users, index.n_items)
        self.user_table_, self.item_table_ = tfidf_svd(index, dim, self.seed)
        return self


class Word2Vec(_Embedder):
    """SGNS over user histories (item tokens) and item audiences (user tokens)."""

    method = "word2vec"

    def __init__(self, dim: int = 64, window: int = 5, negatives: int = 5, epochs: int = 5,
                 lr: float = 0.025, seed: int = 0):
        self.dim = dim
        self.window = window
        self.negatives = negatives
        self.epochs = epochs
        self.lr = lr
        self.seed = seed

    def fit(self, index: InteractionIndex, y=None):
        corpus = user_sequences(index).shifted(index.n_users).concat(item_sequences(index))
        w_in, _ = train_sgns(corpus, index.n_users + index.n_items, self.dim, self.window,
                             self.negatives, self.epochs, self.lr, self.seed)
        self.user_table_, self.item_table_ = _split(self.method, w_in, index.n_users, self.seed)
        return self


class DeepWalk(_Embedder):
    method = "deepwalk"

    def __init__(self, dim: int = 64, num_walks: int = 10, walk_len: int = 40, window: int = 5,
                 negatives: int = 5, epochs: int = 5, lr: float = 0.025, seed: int = 0):
        self.dim = dim
        self.num_walks = num_walks
        self.walk_len = walk_len
        self.window = window
        self.negatives = negatives
        self.epochs = epochs
        self.lr = lr
        self.seed = seed

    def fit(self, index: InteractionIndex, y=None):
        corpus = generate_walks(index, self.num_walks, self.walk_len, self.seed)
        w_in, _ = train_sgns(corpus, index.n_users + index.n_items, self.dim, self.window,
                             self.negatives, self.epochs, self.lr, self.seed)
        self.user_table_, self.item_table_ = _split(self.method, w_in, index.n_users, self.seed)
        return self
