"""Stage-2 feature matrix: stacked model scores, entity statistics, embedding distances.

Column order is fixed and documented in the serialized header::

    score.<model>...            one per score list, in the order given
    user.<stat>...              STAT_NAMES over the user's ratings
    item.<stat>...              STAT_NAMES over the item's ratings
    dist.<family>.<measure>...  DISTANCE_NAMES per embedding family

Missing values: a pair absent from a score list scores 0.0; an entity absent
from the statistics index or an embedding table gets ``MISSING`` in the
corresponding columns (its count columns get 0).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset_io import CandidateLists, DataFormatError, IdMaps, InteractionIndex
from .scores import ScoreList

logger = logging.getLogger(__name__)

MISSING = -999.0
STAT_NAMES = ("count", "n_distinct", "rating_min", "rating_median", "rating_max",
              "rating_mean", "rating_std")
DISTANCE_NAMES = ("cosine", "manhattan", "ruzicka_jaccard", "euclidean", "pearson")


@dataclass(frozen=True)
class StatTable:
    """Per-entity statistics; ``values[k]`` belongs to ``names[k]``."""

    entity: str
    names: tuple[str, ...]
    values: np.ndarray
    row_of: dict = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "row_of", {n: k for k, n in enumerate(self.names)})

    @property
    def columns(self) -> list[str]:
        return [f"{self.entity}.{s}" for s in STAT_NAMES]

    def lookup(self, names) -> np.ndarray:
        """Rows for ``names``; unknown entities are cold (count 0, rating stats MISSING)."""
        cold = np.array([0.0, 0.0] + [MISSING] * (len(STAT_NAMES) - 2))
        idx = np.array([self.row_of.get(n, -1) for n in names], dtype=np.int64)
        out = np.tile(cold, (len(idx), 1))
        hit = idx >= 0
        out[hit] = self.values[idx[hit]]
        return out


def _row_stats(m) -> np.ndarray:
    """STAT_NAMES for every row of a canonical CSR matrix of ratings."""
    n = m.shape[0]
    counts = np.diff(m.indptr)
    rows = np.repeat(np.arange(n), counts)
    # sort ratings within each row so order statistics are plain offsets
    order = np.lexsort((m.data, rows))
    data = np.asarray(m.data, dtype=np.float64)[order]
    out = np.full((n, len(STAT_NAMES)), MISSING)
    out[:, 0] = counts
    out[:, 1] = counts  # rows are deduplicated (user, item) pairs
    has = counts > 0
    start, c = m.indptr[:-1][has], counts[has]
    out[has, 2] = data[start]
    out[has, 3] = 0.5 * (data[start + (c - 1) // 2] + data[start + c // 2])
    out[has, 4] = data[start + c - 1]
    raw = np.asarray(m.data, dtype=np.float64)
    mean = np.divide(np.bincount(rows, weights=raw, minlength=n), counts, out=np.zeros(n), where=has)
    dev = (raw - mean[rows]) ** 2
    var = np.divide(np.bincount(rows, weights=dev, minlength=n), counts, out=np.zeros(n), where=has)
    out[has, 5] = mean[has]
    out[has, 6] = np.sqrt(var[has])
    return out


def user_stats(index: InteractionIndex) -> StatTable:
    """Count, distinct items, and min/median/max/mean/population-std of each user's ratings."""
    return StatTable("user", index.ids.user_ids, _row_stats(index.user_items))


def item_stats(index: InteractionIndex) -> StatTable:
    return StatTable("item", index.ids.item_ids, _row_stats(index.item_users))


def distance_features_batch(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Row-wise DISTANCE_NAMES for aligned ``(n, d)`` matrices.

    Every measure is symmetric in ``U`` and ``V`` bit for bit: each is built
    from commutative elementwise terms summed in the same order.
    """
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if U.shape != V.shape or U.ndim != 2:
        raise ValueError(f"shape mismatch {U.shape} vs {V.shape}")
    if U.shape[1] < 2:
        raise ValueError("pearson needs at least 2 dimensions")
    n = U.shape[0]
    out = np.empty((n, 5))

    nu, nv = np.sqrt((U * U).sum(1)), np.sqrt((V * V).sum(1))
    denom = nu * nv
    dot = (U * V).sum(1)
    out[:, 0] = np.where(denom > 0, 1.0 - dot / np.where(denom > 0, denom, 1.0), 1.0)

    diff = np.abs(U - V)
    out[:, 1] = diff.sum(1)
    aU, aV = np.abs(U), np.abs(V)
    lo, hi = np.minimum(aU, aV).sum(1), np.maximum(aU, aV).sum(1)
    out[:, 2] = np.where(hi > 0, lo / np.where(hi > 0, hi, 1.0), 0.0)
    out[:, 3] = np.sqrt((diff * diff).sum(1))

    cu, cv = U - U.mean(1, keepdims=True), V - V.mean(1, keepdims=True)
    su, sv = np.sqrt((cu * cu).sum(1)), np.sqrt((cv * cv).sum(1))
    sden = su * sv
    out[:, 4] = np.where(sden > 0, (cu * cv).sum(1) / np.where(sden > 0, sden, 1.0), 0.0)
    return out


def distance_features(e_u, e_i) -> tuple[float, float, float, float, float]:
    """(cosine distance, manhattan, Ruzicka-Jaccard, euclidean, pearson) for one pair."""
    e_u = np.asarray(e_u, dtype=np.float64).reshape(1, -1)
    e_i = np.asarray(e_i, dtype=np.float64).reshape(1, -1)
    return tuple(float(v) for v in distance_features_batch(e_u, e_i)[0])


@dataclass(frozen=True)
class EmbeddingFamily:
    """User and item vectors of one embedding method, addressed through ``ids``."""

    name: str
    user_vectors: np.ndarray
    item_vectors: np.ndarray
    ids: IdMaps

    @classmethod
    def from_tables(cls, user_table, item_table, ids: IdMaps) -> "EmbeddingFamily":
        if user_table.method != item_table.method:
            raise ValueError("user and item tables come from different methods")
        return cls(user_table.method, user_table.vectors, item_table.vectors, ids)

    @property
    def columns(self) -> list[str]:
        return [f"dist.{self.name}.{m}" for m in DISTANCE_NAMES]

    def distances(self, users, items) -> np.ndarray:
        u = np.array([self.ids.user_to_dense.get(x, -1) for x in users], dtype=np.int64)
        i = np.array([self.ids.item_to_dense.get(x, -1) for x in items], dtype=np.int64)
        out = np.full((len(u), 5), MISSING)
        ok = (u >= 0) & (i >= 0)
        if ok.any():
            out[ok] = distance_features_batch(self.user_vectors[u[ok]], self.item_vectors[i[ok]])
        return out


@dataclass
class FeatureMatrix:
    users: list[str]
    items: list[str]
    columns: list[str]
    values: np.ndarray
    groups: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.users), len(self.columns))
        self.groups = np.asarray(self.groups, dtype=np.int64)
        if len(self.users) != len(self.items):
            raise ValueError("users and items must align")
        if int(self.groups.sum()) != len(self.users):
            raise ValueError("group sizes must sum to the row count")
        if len(set(self.columns)) != len(self.columns):
            dup = sorted({c for c in self.columns if self.columns.count(c) > 1})
            raise ValueError(f"duplicate feature columns: {dup}")

    def __len__(self) -> int:
        return len(self.users)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def select(self, columns) -> np.ndarray:
        """Values for ``columns`` in that order; a missing column is an error."""
        pos = {c: k for k, c in enumerate(self.columns)}
        missing = [c for c in columns if c not in pos]
        if missing:
            raise KeyError(f"feature matrix lacks columns {missing}")
        return self.values[:, [pos[c] for c in columns]]

    def pairs(self):
        return zip(self.users, self.items)

    def save(self, path, comment: str | None = None) -> None:
        """TSV with a header line plus ``<path>.groups`` listing ``user<TAB>rows``."""
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            fh.write("\t".join(["user_id", "item_id", *self.columns]) + "\n")
            for u, i, row in zip(self.users, self.items, self.values.tolist()):
                fh.write(u + "\t" + i + "\t" + "\t".join(repr(v) for v in row) + "\n")
        starts = np.r_[0, np.cumsum(self.groups)[:-1]].astype(np.int64)
        with open(groups_path(path), "w", encoding="utf-8", newline="\n") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            for s, g in zip(starts.tolist(), self.groups.tolist()):
                fh.write(f"{self.users[s] if g else ''}\t{g}\n")

    @classmethod
    def load(cls, path) -> "FeatureMatrix":
        path = Path(path)
        users, items, rows, columns = [], [], [], None
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\r\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if columns is None:
                    if parts[:2] != ["user_id", "item_id"]:
                        raise DataFormatError(f"{path}:{lineno}: missing feature header")
                    columns = parts[2:]
                    continue
                if len(parts) != len(columns) + 2:
                    raise DataFormatError(f"{path}:{lineno}: expected {len(columns) + 2} fields")
                users.append(parts[0])
                items.append(parts[1])
                rows.append([float(v) for v in parts[2:]])
        if columns is None:
            raise DataFormatError(f"{path}: empty feature file")
        groups = []
        with open(groups_path(path), "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip() and not line.startswith("#"):
                    groups.append(int(line.rstrip("\r\n").split("\t")[1]))
        values = np.array(rows, dtype=np.float64).reshape(len(rows), len(columns))
        return cls(users, items, columns, values, np.array(groups, dtype=np.int64))


def groups_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".groups")


def feature_columns(score_names, families, with_stats: bool = True) -> list[str]:
    cols = [f"score.{n}" for n in score_names]
    if with_stats:
        cols += [f"user.{s}" for s in STAT_NAMES] + [f"item.{s}" for s in STAT_NAMES]
    for f in families:
        cols += [f"dist.{f}.{m}" for m in DISTANCE_NAMES]
    return cols


def assemble(candidates: CandidateLists, score_lists: list[ScoreList],
             stats: tuple[StatTable, StatTable] | None = None,
             embeddings: list[EmbeddingFamily] = ()) -> FeatureMatrix:
    """One row per (user, candidate) in run order; see the module docstring for columns."""
    users = [u for u, c in candidates.entries for _ in c]
    items = [i for _, c in candidates.entries for i in c]
    groups = np.array([len(c) for _, c in candidates.entries], dtype=np.int64)
    columns = feature_columns([s.model_name for s in score_lists], [e.name for e in embeddings],
                              with_stats=stats is not None)
    if len(set(columns)) != len(columns):
        raise ValueError(f"conflicting feature column names in {columns}")
    blocks = []
    pairs = list(zip(users, items))
    for s in score_lists:
        blocks.append(np.array([s.scores.get(p, 0.0) for p in pairs], dtype=np.float64)[:, None])
    if stats is not None:
        ustats, istats = stats
        blocks.append(ustats.lookup(users))
        blocks.append(istats.lookup(items))
    for fam in embeddings:
        blocks.append(fam.distances(users, items))
    values = np.hstack(blocks) if blocks else np.zeros((len(users), 0))
    logger.info("assembled feature matrix rows=%d cols=%d", *values.shape)
    return FeatureMatrix(users, items, columns, values, groups)
