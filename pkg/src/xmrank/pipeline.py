"""Two-stage pipeline orchestration with on-disk artifacts per stage.

Layout under ``output.dir``::

    prepare/   merged.tsv target.tsv {valid,test}_run.tsv {valid,test}_qrel.tsv
    recall/    <model>.{valid,test}.tsv
    embed/     <method>.{user,item}.bin
    gnn/       model.bin gnn.{valid,test}.tsv
    features/  {valid,test}.tsv (+ .groups sidecars)
    gbdt/      <variant>.{valid,test}.tsv <variant>.fold<k>.bin
    ensemble/  weights.json ensemble.{valid,test}.tsv submission.tsv submission_run.tsv
    eval/      report.txt

Every stage writes ``manifest.json`` holding the provenance hash of the
config values it depends on (its own namespaces plus its ancestors'). Text
artifacts carry the same hash in a leading ``#`` line and binary ones in
their metadata; the submission files stay in the plain contest format.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from .config import STAGE_NAMESPACES, ConfigError, PipelineConfig
from .dataset_io import (
    load_market,
    merge_dedup,
    parse_interactions,
    parse_qrel,
    parse_run,
    build_index,
    write_interactions,
    write_run,
)
from .embeddings import DeepWalk, EmbeddingTable, TfidfSvd, Word2Vec
from .evaluation import (
    format_table,
    evaluate_run,
    grid_search_weights,
    weighted_ensemble,
    write_submission,
)
from .features import EmbeddingFamily, FeatureMatrix, assemble, item_stats, user_stats
from .gbdt import FoldPlan, GbdtParams, kfold_train
from .gnn import GnnRanker
from .neighborhood import ItemCF, PersonalRank, Swing, UserCF
from .scores import ScoreList, read_scores, write_scores

logger = logging.getLogger(__name__)

STAGES = ("prepare", "recall", "embed", "gnn", "features", "gbdt", "ensemble", "eval")
UPSTREAM = {
    "prepare": (),
    "recall": ("prepare",),
    "embed": ("prepare",),
    "gnn": ("prepare",),
    "features": ("recall", "embed", "gnn"),
    "gbdt": ("features",),
    "ensemble": ("gbdt",),
    "eval": ("ensemble",),
}
SPLITS = ("valid", "test")


class PipelineError(RuntimeError):
    pass


class MissingArtifactError(PipelineError):
    pass


class ConfigMismatchError(PipelineError):
    pass


def ancestors(stage: str) -> list[str]:
    seen: list[str] = []
    todo = list(UPSTREAM[stage])
    while todo:
        s = todo.pop()
        if s not in seen:
            seen.append(s)
            todo.extend(UPSTREAM[s])
    return sorted(seen, key=STAGES.index)


def stage_hash(cfg: PipelineConfig, stage: str) -> str:
    namespaces = set()
    for s in (stage, *ancestors(stage)):
        namespaces.update(STAGE_NAMESPACES[s])
    return cfg.hash(namespaces)


def variant_names(cfg: PipelineConfig) -> list[str]:
    short = {"pointwise_logistic": "pointwise", "pairwise_lambdarank": "lambdarank"}
    out = []
    for obj in cfg["gbdt.objectives"]:
        if obj not in short:
            raise ConfigError(f"gbdt.objectives: unknown objective {obj!r}; valid: {sorted(short)}")
        out += [f"{short[obj]}_s{j}" for j in range(cfg["gbdt.seeds_per_objective"])]
    return out


class Pipeline:
    def __init__(self, cfg: PipelineConfig, force: bool = False):
        self.cfg = cfg
        self.force = force
        self._cache: dict = {}

    # ----------------------------------------------------------- plumbing
    def stage_dir(self, stage: str) -> Path:
        return self.cfg.output_dir / stage

    def provenance(self, stage: str) -> str:
        return f"xmrank stage={stage} config_hash={stage_hash(self.cfg, stage)}"

    def _manifest(self, stage: str) -> dict | None:
        path = self.stage_dir(stage) / "manifest.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def check_upstream(self, stage: str) -> None:
        for up in UPSTREAM[stage]:
            manifest = self._manifest(up)
            if manifest is None:
                raise MissingArtifactError(
                    f"stage {stage!r} needs artifacts from stage {up!r}; run `xmrank {up}` first")
            want = stage_hash(self.cfg, up)
            if manifest.get("config_hash") != want:
                msg = (f"stage {up!r} artifacts were built with config hash {manifest.get('config_hash')}, "
                       f"current config gives {want}; rerun `xmrank {up}` or pass --force")
                if not self.force:
                    raise ConfigMismatchError(msg)
                logger.warning("--force: %s", msg)

    def _finish(self, stage: str, files: list[str], rows: dict, extra: dict | None = None) -> dict:
        manifest = {"stage": stage, "config_hash": stage_hash(self.cfg, stage),
                    "files": sorted(files), "rows": rows}
        if extra:
            manifest.update(extra)
        path = self.stage_dir(stage) / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return manifest

    def run(self, stage: str):
        if stage == "all":
            return {s: self.run(s) for s in STAGES}
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; valid: {', '.join(STAGES + ('all',))}")
        self.check_upstream(stage)
        self.stage_dir(stage).mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        manifest = getattr(self, f"_stage_{stage}")()
        rows = manifest.get("rows", {})
        logger.info("stage=%s wall=%.2fs rows=%s", stage, time.perf_counter() - t0,
                    " ".join(f"{k}:{v}" for k, v in sorted(rows.items())) or "-")
        return manifest

    # ------------------------------------------------------------- inputs
    def _prep(self, name: str) -> Path:
        return self.stage_dir("prepare") / name

    def merged_index(self):
        if "merged" not in self._cache:
            table = parse_interactions(self._prep("merged.tsv"))
            self._cache["merged"] = build_index(table)
        return self._cache["merged"]

    def target_index(self):
        if "target" not in self._cache:
            table = parse_interactions(self._prep("target.tsv"))
            self._cache["target"] = build_index(table)
        return self._cache["target"]

    def run_of(self, split: str):
        key = f"run.{split}"
        if key not in self._cache:
            self._cache[key] = parse_run(self._prep(f"{split}_run.tsv"), expected_length=None)
        return self._cache[key]

    def qrel_of(self, split: str):
        path = self._prep(f"{split}_qrel.tsv")
        return parse_qrel(path) if path.exists() else None

    def stage1_names(self) -> list[str]:
        names = list(self.cfg["recall.models"])
        if self.cfg["gnn.enabled"]:
            names.append("gnn")
        return names

    def scores_path(self, name: str, split: str) -> Path:
        stage = "gnn" if name == "gnn" else "recall"
        return self.stage_dir(stage) / f"{name}.{split}.tsv"

    # ------------------------------------------------------------- stages
    def _stage_prepare(self) -> dict:
        cfg = self.cfg
        cfg.validate_paths()
        root, target = cfg.data_root, cfg["data.target_market"]
        delim, files = cfg["data.delimiter"], cfg["data.train_files"]
        tables = [load_market(root / m, files, delim) for m in cfg["data.source_markets"]]
        target_table = load_market(root / target, files, delim)
        merged = merge_dedup(tables + [target_table], market="merged")
        prov = self.provenance("prepare")
        out = self.stage_dir("prepare")
        write_interactions(merged, out / "merged.tsv", prov)
        write_interactions(target_table, out / "target.tsv", prov)
        written = ["merged.tsv", "target.tsv"]
        rows = {"merged": len(merged), "target": len(target_table)}
        for split in SPLITS:
            src = root / target / f"{split}_run.tsv"
            if not src.exists():
                raise ConfigError(f"missing candidate file {src}")
            run = parse_run(src, delim, cfg["data.item_delimiter"], cfg["data.run_length"])
            write_run(run, out / f"{split}_run.tsv", comment=prov)
            written.append(f"{split}_run.tsv")
            rows[f"{split}_users"] = len(run)
            qsrc = root / target / f"{split}_qrel.tsv"
            if qsrc.exists():
                qrel = parse_qrel(qsrc, delim)
                with open(out / f"{split}_qrel.tsv", "w", encoding="utf-8", newline="\n") as fh:
                    fh.write(f"# {prov}\nuser_id\titem_id\trating\n")
                    for (u, i), r in qrel.items():
                        fh.write(f"{u}\t{i}\t{r!r}\n")
                written.append(f"{split}_qrel.tsv")
            elif split == "valid":
                raise ConfigError(f"missing {qsrc}: validation labels are needed for stage-2 training")
        self._cache.clear()
        return self._finish("prepare", written, rows)

    def _recall_model(self, name: str):
        c = self.cfg
        if name == "itemcf":
            return ItemCF(c["itemcf.top_k"], c["itemcf.use_iuf"])
        if name == "usercf":
            return UserCF(c["usercf.top_k"], c["usercf.use_iuf"])
        if name == "swing":
            return Swing(c["swing.alpha"], c["swing.top_k"])
        if name == "personalrank":
            return PersonalRank(c["personalrank.restart"], c["personalrank.max_iters"], c["personalrank.tol"])
        raise ConfigError(f"recall.models: unknown model {name!r}; valid: itemcf, usercf, swing, personalrank")

    def _stage_recall(self) -> dict:
        _, ix = self.merged_index()
        runs = {s: self.run_of(s) for s in SPLITS}
        users = sorted({u for r in runs.values() for u in r.users})
        prov = self.provenance("recall")
        files, rows = [], {}
        for name in self.cfg["recall.models"]:
            model = self._recall_model(name)
            t0 = time.perf_counter()
            model.fit(ix, users=users) if name == "usercf" else model.fit(ix)
            for split, run in runs.items():
                scores = model.score(run)
                write_scores(ScoreList(name, scores.scores), self.scores_path(name, split), run, prov)
                files.append(f"{name}.{split}.tsv")
                rows[f"{name}.{split}"] = run.n_pairs()
            logger.info("recall model=%s wall=%.2fs", name, time.perf_counter() - t0)
        return self._finish("recall", files, rows)

    def _embedder(self, method: str):
        c, seed, dim = self.cfg, self.cfg["seed"], self.cfg["embed.dim"]
        if method == "tfidf_svd":
            return TfidfSvd(dim, seed)
        if method == "word2vec":
            w = c.section("word2vec")
            return Word2Vec(dim, w["window"], w["negatives"], w["epochs"], w["lr"], seed)
        if method == "deepwalk":
            d = c.section("deepwalk")
            return DeepWalk(dim, d["num_walks"], d["walk_len"], d["window"], d["negatives"], d["epochs"],
                            d["lr"], seed)
        raise ConfigError(f"embed.methods: unknown method {method!r}; valid: tfidf_svd, word2vec, deepwalk")

    def _stage_embed(self) -> dict:
        _, ix = self.merged_index()
        prov = self.provenance("embed")
        files, rows = [], {}
        for method in self.cfg["embed.methods"]:
            t0 = time.perf_counter()
            ut, it = self._embedder(method).fit(ix).tables
            ut.save(self.stage_dir("embed") / f"{method}.user.bin", prov)
            it.save(self.stage_dir("embed") / f"{method}.item.bin", prov)
            files += [f"{method}.user.bin", f"{method}.item.bin"]
            rows[method] = len(ut) + len(it)
            logger.info("embed method=%s dim=%d wall=%.2fs", method, ut.dim, time.perf_counter() - t0)
        return self._finish("embed", files, rows)

    def _stage_gnn(self) -> dict:
        if not self.cfg["gnn.enabled"]:
            return self._finish("gnn", [], {}, {"enabled": False})
        _, ix = self.target_index()
        hyper = {k: v for k, v in self.cfg.section("gnn").items() if k != "enabled"}
        hyper["mlp_sizes"] = tuple(hyper["mlp_sizes"])
        ranker = GnnRanker(**hyper, seed=self.cfg["seed"]).fit(ix)
        prov = self.provenance("gnn")
        ranker.model_.save(self.stage_dir("gnn") / "model.bin", prov)
        files, rows = ["model.bin"], {"train": ix.nnz}
        for split in SPLITS:
            run = self.run_of(split)
            write_scores(ranker.score(run), self.scores_path("gnn", split), run, prov)
            files.append(f"gnn.{split}.tsv")
            rows[f"gnn.{split}"] = run.n_pairs()
        h = ranker.model_.loss_history
        logger.info("gnn loss %.5f -> %.5f over %d epochs", h[0], h[-1], len(h) - 1)
        return self._finish("gnn", files, rows, {"enabled": True})

    def _stage_features(self) -> dict:
        ids, ix = self.merged_index()
        stats = (user_stats(ix), item_stats(ix)) if self.cfg["features.stats"] else None
        families = []
        for fam in self.cfg["features.distance_families"]:
            if fam not in self.cfg["embed.methods"]:
                raise ConfigError(f"features.distance_families lists {fam!r} which embed.methods does not build")
            d = self.stage_dir("embed")
            families.append(EmbeddingFamily.from_tables(EmbeddingTable.load(d / f"{fam}.user.bin"),
                                                        EmbeddingTable.load(d / f"{fam}.item.bin"), ids))
        prov = self.provenance("features")
        files, rows = [], {}
        for split in SPLITS:
            run = self.run_of(split)
            lists = [read_scores(self.scores_path(n, split), n) for n in self.stage1_names()]
            fm = assemble(run, lists, stats, families)
            fm.save(self.stage_dir("features") / f"{split}.tsv", prov)
            files += [f"{split}.tsv", f"{split}.tsv.groups"]
            rows[split] = len(fm)
        return self._finish("features", files, rows, {"columns": fm.columns})

    def _stage_gbdt(self) -> dict:
        c = self.cfg
        d = self.stage_dir("features")
        fm_valid = FeatureMatrix.load(d / "valid.tsv")
        fm_test = FeatureMatrix.load(d / "test.tsv")
        X_test = fm_test.select(fm_valid.columns)
        qrel = self.qrel_of("valid")
        y = np.array([1.0 if qrel.get(p, 0) > 0 else 0.0 for p in fm_valid.pairs()])
        run_v, run_t = self.run_of("valid"), self.run_of("test")
        keys = run_v.users
        plan = FoldPlan.by_hash(keys, c["gbdt.folds"])
        prov = self.provenance("gbdt")
        files, rows = [], {"train_rows": len(fm_valid), "positives": int(y.sum())}
        names = variant_names(c)
        specs = [(obj, j) for obj in c["gbdt.objectives"] for j in range(c["gbdt.seeds_per_objective"])]
        for name, (obj, j) in zip(names, specs):
            params = GbdtParams(n_trees=c["gbdt.n_trees"], learning_rate=c["gbdt.learning_rate"],
                                max_depth=c["gbdt.max_depth"], min_child_weight=c["gbdt.min_child_weight"],
                                n_bins=c["gbdt.n_bins"], lambda_l2=c["gbdt.lambda_l2"], objective=obj,
                                ndcg_k=c["eval.k"], seed=c["seed"] + j,
                                bagging_fraction=c["gbdt.bagging_fraction"])
            t0 = time.perf_counter()
            oof, test, models = kfold_train(fm_valid.values, y, keys, fm_valid.groups, plan, params, X_test,
                                            feature_names=fm_valid.columns, return_models=True)
            for k, m in enumerate(models):
                m.save(self.stage_dir("gbdt") / f"{name}.fold{k}.bin", prov)
                files.append(f"{name}.fold{k}.bin")
            write_scores(ScoreList.from_flat(name, run_v, oof), self.stage_dir("gbdt") / f"{name}.valid.tsv",
                         run_v, prov)
            write_scores(ScoreList.from_flat(name, run_t, test), self.stage_dir("gbdt") / f"{name}.test.tsv",
                         run_t, prov)
            files += [f"{name}.valid.tsv", f"{name}.test.tsv"]
            logger.info("gbdt variant=%s folds=%d wall=%.2fs", name, plan.k, time.perf_counter() - t0)
        return self._finish("gbdt", files, rows, {"members": names})

    def _stage_ensemble(self) -> dict:
        c = self.cfg
        members = self._manifest("gbdt")["members"]
        norm = c["ensemble.normalization"]
        if norm not in ("minmax", "none"):
            raise ConfigError("ensemble.normalization must be 'minmax' or 'none'")
        normalize = norm == "minmax"
        lists = {s: [read_scores(self.stage_dir("gbdt") / f"{m}.{s}.tsv", m) for m in members] for s in SPLITS}
        run_v, run_t = self.run_of("valid"), self.run_of("test")
        weights, best = grid_search_weights(lists["valid"], run_v, self.qrel_of("valid"), c["ensemble.step"],
                                            c["eval.k"], normalize)
        out = self.stage_dir("ensemble")
        (out / "weights.json").write_text(json.dumps(
            {"members": members, "weights": weights, "valid_ndcg": best, "normalization": norm,
             "config_hash": stage_hash(c, "ensemble")}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        prov = self.provenance("ensemble")
        ens = {}
        for split, run in (("valid", run_v), ("test", run_t)):
            ens[split] = weighted_ensemble(lists[split], weights, run, normalize, "ensemble")
            write_scores(ens[split], out / f"ensemble.{split}.tsv", run, prov)
        write_submission(ens["test"], run_t, out / "submission.tsv", out / "submission_run.tsv")
        logger.info("ensemble weights %s valid ndcg@%d=%.4f", dict(zip(members, weights)), c["eval.k"], best)
        return self._finish("ensemble", ["weights.json", "ensemble.valid.tsv", "ensemble.test.tsv",
                                         "submission.tsv", "submission_run.tsv"],
                            {"submission_rows": run_t.n_pairs()}, {"weights": weights})

    def reports(self) -> list:
        k = self.cfg["eval.k"]
        members = self._manifest("gbdt")["members"]
        out = []
        for split in SPLITS:
            qrel = self.qrel_of(split)
            if qrel is None:
                logger.info("no %s qrel; skipping %s metrics", split, split)
                continue
            run = self.run_of(split)
            paths = [(n, self.scores_path(n, split)) for n in self.stage1_names()]
            paths += [(m, self.stage_dir("gbdt") / f"{m}.{split}.tsv") for m in members]
            paths.append(("ensemble", self.stage_dir("ensemble") / f"ensemble.{split}.tsv"))
            for name, path in paths:
                out.append(evaluate_run(read_scores(path, name), run, qrel, k, split))
        return out

    def _stage_eval(self) -> dict:
        reports = self.reports()
        text = format_table(reports) + "\n\n" + "\n".join(r.key_values() for r in reports) + "\n"
        (self.stage_dir("eval") / "report.txt").write_text(text, encoding="utf-8")
        for line in format_table(reports).splitlines():
            logger.info("%s", line)
        metrics = {f"{r.split}.{r.name}": {"ndcg": r.ndcg, "hr": r.hr, "users": r.n_users} for r in reports}
        return self._finish("eval", ["report.txt"], {"reports": len(reports)}, {"metrics": metrics})
