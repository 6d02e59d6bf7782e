"""Reading, merging and indexing the market TSV files.

Every market folder holds ``train.tsv``/``train_5core.tsv`` (user, item,
rating), ``valid_qrel.tsv`` (held-out positives, same layout) and one or more
candidate run files (``valid_run.tsv``/``test_run.tsv``) with one user per row
followed by a delimited candidate list.

Lines beginning with ``#`` are treated as comments everywhere; xmrank uses them
to stamp the config hash into its own artifacts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import pandas as pd
import scipy.sparse as sp

logger = logging.getLogger(__name__)

CONTEST_RUN_LENGTH = 100


class DataFormatError(ValueError):
    """A data file does not follow the expected layout."""


@dataclass
class InteractionTable:
    """Parallel columns of (user_id, item_id, rating)."""

    users: list[str] = field(default_factory=list)
    items: list[str] = field(default_factory=list)
    ratings: np.ndarray = field(default_factory=lambda: np.zeros(0))
    market: str = ""

    def __post_init__(self):
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        if not (len(self.users) == len(self.items) == len(self.ratings)):
            raise ValueError("users, items and ratings must have equal length")

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[tuple[str, str, float]]:
        return iter(self.rows)

    @property
    def rows(self) -> list[tuple[str, str, float]]:
        return list(zip(self.users, self.items, self.ratings.tolist()))

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[str, str, float]], market: str = "") -> "InteractionTable":
        rows = list(rows)
        if not rows:
            return cls(market=market)
        users, items, ratings = zip(*rows)
        return cls([str(u) for u in users], [str(i) for i in items],
                   np.asarray(ratings, dtype=np.float64), market)

    def __eq__(self, other) -> bool:
        if not isinstance(other, InteractionTable):
            return NotImplemented
        return (self.users == other.users and self.items == other.items
                and np.array_equal(self.ratings, other.ratings))

    def n_users(self) -> int:
        return len(set(self.users))

    def n_items(self) -> int:
        return len(set(self.items))


@dataclass(frozen=True)
class IdMaps:
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    user_to_dense: dict = field(repr=False, compare=False, default=None)
    item_to_dense: dict = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self.user_to_dense is None:
            object.__setattr__(self, "user_to_dense", {u: k for k, u in enumerate(self.user_ids)})
        if self.item_to_dense is None:
            object.__setattr__(self, "item_to_dense", {i: k for k, i in enumerate(self.item_ids)})

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)


@dataclass(frozen=True)
class InteractionIndex:
    """CSR adjacency in both directions over dense IDs.

    ``user_items`` is ``M x N`` and ``item_users`` its exact transpose, both
    in canonical CSR form (sorted column ids, no duplicates). Stored values
    are ratings; use :meth:`binary` for co-occurrence work since a rating of
    0 is still an interaction.
    """

    ids: IdMaps
    user_items: sp.csr_matrix
    item_users: sp.csr_matrix
    r_max: float

    @property
    def n_users(self) -> int:
        return self.user_items.shape[0]

    @property
    def n_items(self) -> int:
        return self.user_items.shape[1]

    @property
    def nnz(self) -> int:
        return int(self.user_items.indptr[-1])

    def user_history(self, u: int) -> np.ndarray:
        m = self.user_items
        return m.indices[m.indptr[u]: m.indptr[u + 1]]

    def item_history(self, i: int) -> np.ndarray:
        m = self.item_users
        return m.indices[m.indptr[i]: m.indptr[i + 1]]

    def user_degree(self) -> np.ndarray:
        return np.diff(self.user_items.indptr)

    def item_degree(self) -> np.ndarray:
        return np.diff(self.item_users.indptr)

    def binary(self, transpose: bool = False) -> sp.csr_matrix:
        m = self.item_users if transpose else self.user_items
        return sp.csr_matrix((np.ones_like(m.data), m.indices, m.indptr), shape=m.shape)

    def flatten(self) -> InteractionTable:
        """Triples back in (user dense id, item dense id) order."""
        m = self.user_items
        rows = np.repeat(np.arange(m.shape[0]), np.diff(m.indptr))
        return InteractionTable([self.ids.user_ids[r] for r in rows],
                                [self.ids.item_ids[c] for c in m.indices],
                                m.data.copy())


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def parse_interactions(path, delimiter: str = "\t", market: str = "") -> InteractionTable:
    """Parse a ``user<delim>item<delim>rating`` file.

    A header is recognised only on the first data line, when its third field
    is not numeric. Extra trailing fields are ignored.
    """
    users: list[str] = []
    items: list[str] = []
    ratings: list[float] = []
    first = True
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split(delimiter)
            if len(parts) < 3:
                raise DataFormatError(f"{path}:{lineno}: expected at least 3 fields, got {len(parts)}")
            if first:
                first = False
                if not _is_number(parts[2]):
                    continue
            try:
                r = float(parts[2])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric rating {parts[2]!r}") from None
            if not math.isfinite(r) or r < 0:
                raise DataFormatError(f"{path}:{lineno}: rating must be finite and non-negative, got {r}")
            users.append(parts[0])
            items.append(parts[1])
            ratings.append(r)
    return InteractionTable(users, items, np.asarray(ratings, dtype=np.float64), market)


def write_interactions(table: InteractionTable, path, comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("user_id\titem_id\trating\n")
        for u, i, r in zip(table.users, table.items, table.ratings.tolist()):
            fh.write(f"{u}\t{i}\t{r!r}\n")


def merge_dedup(tables: list[InteractionTable], market: str = "") -> InteractionTable:
    """Concatenate tables, collapsing repeated (user, item) pairs.

    The last occurrence wins and keeps its position in the concatenation.
    """
    if not tables:
        return InteractionTable(market=market)
    users = [u for t in tables for u in t.users]
    items = [i for t in tables for i in t.items]
    ratings = np.concatenate([t.ratings for t in tables]) if tables else np.zeros(0)
    if not users:
        return InteractionTable(market=market or tables[0].market)
    frame = pd.DataFrame({"u": users, "i": items})
    keep = ~frame.duplicated(subset=["u", "i"], keep="last").to_numpy()
    idx = np.flatnonzero(keep)
    return InteractionTable([users[k] for k in idx], [items[k] for k in idx], ratings[idx],
                            market or tables[0].market)


def load_market(folder, files=("train.tsv", "train_5core.tsv"), delimiter: str = "\t") -> InteractionTable:
    """Merge the training files present in one market folder (train_merge)."""
    folder = Path(folder)
    tables = []
    for name in files:
        path = folder / name
        if path.exists():
            tables.append(parse_interactions(path, delimiter, market=folder.name))
    if not tables:
        raise FileNotFoundError(f"no training file among {list(files)} in {folder}")
    return merge_dedup(tables, market=folder.name)


@dataclass
class CandidateLists:
    entries: list[tuple[str, list[str]]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def users(self) -> list[str]:
        return [u for u, _ in self.entries]

    def n_pairs(self) -> int:
        return sum(len(c) for _, c in self.entries)

    def pairs(self) -> Iterator[tuple[str, str]]:
        for u, cands in self.entries:
            for i in cands:
                yield u, i


def parse_run(path, delimiter: str = "\t", item_delimiter: str = ",",
              expected_length: int | None = CONTEST_RUN_LENGTH) -> CandidateLists:
    entries: list[tuple[str, list[str]]] = []
    seen: set[str] = set()
    n_off = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            user, sep, rest = line.partition(delimiter)
            if not sep:
                raise DataFormatError(f"{path}:{lineno}: missing delimiter between user and candidates")
            if user in seen:
                raise DataFormatError(f"{path}:{lineno}: duplicate user row {user!r}")
            seen.add(user)
            cands = [c for c in rest.split(item_delimiter) if c != ""]
            if len(set(cands)) != len(cands):
                raise DataFormatError(f"{path}:{lineno}: duplicate candidate in row of user {user!r}")
            if expected_length is not None and len(cands) != expected_length:
                n_off += 1
            entries.append((user, cands))
    if n_off:
        logger.warning("%s: %d of %d rows do not have %d candidates", path, n_off, len(entries),
                       expected_length)
    return CandidateLists(entries)


def write_run(run: CandidateLists, path, delimiter: str = "\t", item_delimiter: str = ",",
              comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for user, cands in run.entries:
            fh.write(f"{user}{delimiter}{item_delimiter.join(cands)}\n")


def parse_qrel(path, delimiter: str = "\t") -> dict[tuple[str, str], float]:
    """Relevance labels keyed by (user, item); values > 0 are positives."""
    table = parse_interactions(path, delimiter)
    return {(u, i): r for u, i, r in zip(table.users, table.items, table.ratings.tolist())}


def build_index(table: InteractionTable) -> tuple[IdMaps, InteractionIndex]:
    """Assign dense IDs in first-appearance order and build both CSR views."""
    ucodes, uniq_u = pd.factorize(pd.Series(table.users, dtype=object), sort=False)
    icodes, uniq_i = pd.factorize(pd.Series(table.items, dtype=object), sort=False)
    ids = IdMaps(tuple(str(u) for u in uniq_u), tuple(str(i) for i in uniq_i))
    shape = (len(uniq_u), len(uniq_i))
    coo = sp.coo_matrix((table.ratings, (ucodes, icodes)), shape=shape)
    if len(table) and coo.nnz != len(set(zip(ucodes.tolist(), icodes.tolist()))):
        raise ValueError("table contains duplicate (user, item) pairs; run merge_dedup first")
    user_items = _canonical_csr(coo.tocsr())
    item_users = _canonical_csr(coo.T.tocsr())
    r_max = float(table.ratings.max()) if len(table) else 0.0
    return ids, InteractionIndex(ids, user_items, item_users, r_max)


def _canonical_csr(m: sp.csr_matrix) -> sp.csr_matrix:
    # explicit zeros are kept: a rating of 0 is still an interaction
    m.sort_indices()
    m.indptr = m.indptr.astype(np.int64)
    m.indices = m.indices.astype(np.int64)
    return m
