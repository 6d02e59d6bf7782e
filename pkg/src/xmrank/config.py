"""Flat ``key = value`` pipeline configuration.

One namespace prefix per module (``itemcf.top_k``, ``gbdt.n_trees`` ...).
Lines starting with ``#`` are comments. Any key can be overridden through
the environment as ``XMRANK_<KEY>`` with dots turned into underscores and
letters upper-cased, e.g. ``XMRANK_GBDT_N_TREES=50``. Relative paths are
resolved against the directory of the config file.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

ENV_PREFIX = "XMRANK_"


class ConfigError(ValueError):
    """Invalid key, value or missing path in a pipeline configuration."""


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in _str_list(text))


def _delimiter(text: str) -> str:
    return {"tab": "\t", "\\t": "\t", "comma": ",", "space": " "}.get(text.strip().lower(), text)


# key -> (default, parser). Defaults are the stated hyperparameters.
SCHEMA: dict[str, tuple[object, object]] = {
    "data.root": (".", str),
    "data.target_market": ("t1", str),
    "data.source_markets": ((), _str_list),
    "data.train_files": (("train.tsv", "train_5core.tsv"), _str_list),
    "data.delimiter": ("\t", _delimiter),
    "data.item_delimiter": (",", _delimiter),
    "data.run_length": (100, int),
    "output.dir": ("xmrank_out", str),
    "seed": (0, int),
    "recall.models": (("itemcf", "usercf", "swing", "personalrank"), _str_list),
    "itemcf.top_k": (200, int),
    "itemcf.use_iuf": (False, _bool),
    "usercf.top_k": (200, int),
    "usercf.use_iuf": (False, _bool),
    "swing.alpha": (1.0, float),
    "swing.top_k": (200, int),
    "personalrank.restart": (0.15, float),
    "personalrank.max_iters": (1000, int),
    "personalrank.tol": (1e-8, float),
    "embed.methods": (("tfidf_svd", "word2vec", "deepwalk"), _str_list),
    "embed.dim": (64, int),
    "word2vec.window": (5, int),
    "word2vec.negatives": (5, int),
    "word2vec.epochs": (5, int),
    "word2vec.lr": (0.025, float),
    "deepwalk.num_walks": (10, int),
    "deepwalk.walk_len": (40, int),
    "deepwalk.window": (5, int),
    "deepwalk.negatives": (5, int),
    "deepwalk.epochs": (5, int),
    "deepwalk.lr": (0.025, float),
    "gnn.enabled": (True, _bool),
    "gnn.dim": (64, int),
    "gnn.n_layers": (3, int),
    "gnn.mlp_sizes": ((64, 32), _int_list),
    "gnn.lr": (1e-3, float),
    "gnn.epochs": (30, int),
    "gnn.eps": (0.1, float),
    "gnn.eps_neg_scale": (0.5, float),
    "gnn.n_negatives": (99, int),
    "gnn.batch_size": (256, int),
    "gnn.rating_divisor": (10.0, float),
    "gnn.init_std": (0.1, float),
    "features.stats": (True, _bool),
    "features.distance_families": (("tfidf_svd", "word2vec", "deepwalk"), _str_list),
    "gbdt.objectives": (("pointwise_logistic", "pairwise_lambdarank"), _str_list),
    "gbdt.seeds_per_objective": (2, int),
    "gbdt.folds": (5, int),
    "gbdt.n_trees": (300, int),
    "gbdt.learning_rate": (0.05, float),
    "gbdt.max_depth": (6, int),
    "gbdt.min_child_weight": (1e-3, float),
    "gbdt.n_bins": (64, int),
    "gbdt.lambda_l2": (1.0, float),
    "gbdt.bagging_fraction": (0.8, float),
    "ensemble.step": (0.1, float),
    "ensemble.normalization": ("minmax", str),
    "eval.k": (10, int),
}

# namespaces whose values feed each stage (upstream stages are added by the pipeline)
STAGE_NAMESPACES = {
    "prepare": ("data",),
    "recall": ("recall", "itemcf", "usercf", "swing", "personalrank"),
    "embed": ("embed", "word2vec", "deepwalk"),
    "gnn": ("gnn",),
    "features": ("features",),
    "gbdt": ("gbdt", "eval"),
    "ensemble": ("ensemble",),
    "eval": ("eval",),
}
_GLOBAL_KEYS = ("seed",)


def env_name(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "_")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value == "\t":
        return "tab"
    return str(value)


@dataclass
class PipelineConfig:
    values: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def section(self, prefix: str) -> dict:
        """Values under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def path(self, key: str) -> Path:
        p = Path(self.values[key])
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def output_dir(self) -> Path:
        return self.path("output.dir")

    @property
    def data_root(self) -> Path:
        return self.path("data.root")

    def canonical_lines(self, namespaces=None) -> list[str]:
        keys = sorted(self.values)
        if namespaces is not None:
            keys = [k for k in keys if k in _GLOBAL_KEYS or k.split(".", 1)[0] in namespaces]
        out = []
        for k in keys:
            v = self.values[k]
            if k == "data.root":
                v = str(self.data_root.resolve())
            out.append(f"{k}={_format(v)}")
        return out

    def hash(self, namespaces=None) -> str:
        """Stable digest of the (optionally namespace-restricted) resolved values."""
        text = "\n".join(self.canonical_lines(namespaces))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, **overrides) -> "PipelineConfig":
        vals = dict(self.values)
        for k, v in overrides.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(_unknown(key))
            vals[key] = v
        return PipelineConfig(vals, self.base_dir)

    def validate_paths(self) -> None:
        root = self.data_root
        if not root.is_dir():
            raise ConfigError(f"data.root does not exist: {root}")
        for market in (self["data.target_market"], *self["data.source_markets"]):
            if not (root / market).is_dir():
                raise ConfigError(f"market folder missing: {root / market}")


def _unknown(key: str) -> str:
    return f"unknown config key {key!r}; valid keys: {', '.join(sorted(SCHEMA))}"


def _parse_value(key: str, text: str, origin: str):
    _, parser = SCHEMA[key]
    try:
        return parser(text.strip())
    except ValueError as exc:
        raise ConfigError(f"{origin}: bad value for {key}: {exc}") from None


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {raw!r}")
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: " + _unknown(key))
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key}")
        out[key] = _parse_value(key, value, f"{origin}:{lineno}")
    return out


def load_config(path=None, environ=None, seed: int | None = None) -> PipelineConfig:
    """Defaults, then the file, then ``XMRANK_*`` environment, then ``seed``."""
    environ = os.environ if environ is None else environ
    values = {k: default for k, (default, _) in SCHEMA.items()}
    base = Path(".")
    if path is not None:
        path = Path(path)
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
        base = path.resolve().parent
    known = {env_name(k): k for k in SCHEMA}
    for name, text in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        if name not in known:
            raise ConfigError(f"environment variable {name} matches no config key; "
                              f"valid keys: {', '.join(sorted(SCHEMA))}")
        values[known[name]] = _parse_value(known[name], text, f"${name}")
        logger.info("config override from environment: %s", name)
    if seed is not None:
        values["seed"] = int(seed)
    return PipelineConfig(values, base)


def write_config(path, **overrides) -> Path:
    """Write a complete config file; keys use ``__`` for dots (``gbdt__n_trees=50``)."""
    values = {k: default for k, (default, _) in SCHEMA.items()}
    for k, v in overrides.items():
        key = k.replace("__", ".")
        if key not in SCHEMA:
            raise ConfigError(_unknown(key))
        values[key] = v
    path = Path(path)
    lines = [f"{k} = {_format(values[k])}" for k in sorted(values)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
