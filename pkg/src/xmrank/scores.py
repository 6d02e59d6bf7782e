"""Per-(user, item) score lists exchanged between pipeline stages."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset_io import CandidateLists, DataFormatError


@dataclass
class ScoreList:
    model_name: str
    scores: dict[tuple[str, str], float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scores)

    def get(self, user: str, item: str) -> float:
        return self.scores.get((user, item), 0.0)

    def for_user(self, user: str, candidates: list[str], strict: bool = False) -> np.ndarray:
        if strict:
            try:
                return np.array([self.scores[(user, c)] for c in candidates], dtype=np.float64)
            except KeyError as exc:
                raise KeyError(f"{self.model_name}: no score for pair {exc.args[0]}") from None
        return np.array([self.scores.get((user, c), 0.0) for c in candidates], dtype=np.float64)

    @classmethod
    def from_candidates(cls, model_name: str, run: CandidateLists, values) -> "ScoreList":
        """Zip aligned per-user score arrays back onto the run's pairs."""
        out = {}
        for (user, cands), vals in zip(run.entries, values):
            for c, v in zip(cands, vals):
                out[(user, c)] = float(v)
        return cls(model_name, out)

    @classmethod
    def from_flat(cls, model_name: str, run: CandidateLists, flat) -> "ScoreList":
        flat = np.asarray(flat, dtype=np.float64)
        if len(flat) != run.n_pairs():
            raise ValueError(f"expected {run.n_pairs()} scores, got {len(flat)}")
        out = {}
        for (user, item), v in zip(run.pairs(), flat.tolist()):
            out[(user, item)] = v
        return cls(model_name, out)

    def flat(self, run: CandidateLists) -> np.ndarray:
        return np.array([self.scores.get(p, 0.0) for p in run.pairs()], dtype=np.float64)


def write_scores(scores: ScoreList, path, run: CandidateLists | None = None,
                 comment: str | None = None) -> None:
    """Write ``user_id<TAB>item_id<TAB>score``; rows follow ``run`` order when given."""
    pairs = list(run.pairs()) if run is not None else list(scores.scores)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for u, i in pairs:
            fh.write(f"{u}\t{i}\t{scores.get(u, i)!r}\n")


def read_scores(path, model_name: str | None = None) -> ScoreList:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 3 fields")
            v = float(parts[2])
            if not math.isfinite(v):
                raise DataFormatError(f"{path}:{lineno}: non-finite score")
            out[(parts[0], parts[1])] = v
    if model_name is None:
        model_name = str(path).rsplit("/", 1)[-1].split(".")[0]
    return ScoreList(model_name, out)
