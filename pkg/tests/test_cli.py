import json
import logging
import subprocess
import sys
from pathlib import Path

import pytest

from xmrank import cli
from xmrank.config import SCHEMA, ConfigError, env_name, load_config, parse_config_text, write_config
from xmrank.dataset_io import parse_run
from xmrank.pipeline import STAGES, UPSTREAM, ConfigMismatchError, MissingArtifactError, Pipeline, stage_hash
from xmrank.synthetic import SyntheticSpec, generate, write_dataset

FIXTURES = Path(__file__).resolve().parent / "fixtures"
CONFIG = FIXTURES / "synth50.cfg"
FIXTURE_SPEC = SyntheticSpec(n_users=50, n_source_users=50, seed=0)


@pytest.fixture
def out_env(tmp_path, monkeypatch):
    out = tmp_path / "out"
    monkeypatch.setenv("XMRANK_OUTPUT_DIR", str(out))
    return out


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    """One `all` run on the bundled fixture, shared by the read-only checks below."""
    out = tmp_path_factory.mktemp("full") / "out"
    cfg = load_config(CONFIG, environ={"XMRANK_OUTPUT_DIR": str(out)})
    Pipeline(cfg).run("all")
    return cfg, out


# ------------------------------------------------------------------ config

def test_defaults_cover_every_key_and_file_overrides():
    cfg = load_config(None, environ={})
    assert set(cfg.values) == set(SCHEMA)
    assert cfg["gbdt.n_trees"] == 300 and cfg["gnn.mlp_sizes"] == (64, 32)
    parsed = parse_config_text("# comment\n\ngbdt.n_trees = 7\nitemcf.use_iuf = yes\ndata.delimiter = tab\n")
    assert parsed == {"gbdt.n_trees": 7, "itemcf.use_iuf": True, "data.delimiter": "\t"}


def test_invalid_key_lists_valid_keys(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("gbdt.n_tree = 5\n")
    with pytest.raises(ConfigError) as err:
        load_config(bad, environ={})
    msg = str(err.value)
    assert "gbdt.n_tree" in msg and "gbdt.n_trees" in msg and "itemcf.top_k" in msg
    assert cli.main(["prepare", "--config", str(bad)]) == cli.EXIT_CONFIG


@pytest.mark.parametrize("text", ["gbdt.n_trees = many\n", "no equals sign\n",
                                  "seed = 1\nseed = 2\n", "itemcf.use_iuf = maybe\n"])
def test_malformed_config_lines(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_env_override_and_precedence(tmp_path):
    path = write_config(tmp_path / "c.cfg", gbdt__n_trees=40, seed=3)
    env = {env_name("gbdt.n_trees"): "7", "UNRELATED": "x"}
    assert env_name("gbdt.n_trees") == "XMRANK_GBDT_N_TREES"
    cfg = load_config(path, environ=env)
    assert cfg["gbdt.n_trees"] == 7 and cfg["seed"] == 3
    assert load_config(path, environ=env, seed=11)["seed"] == 11
    with pytest.raises(ConfigError, match="valid keys"):
        load_config(path, environ={"XMRANK_GBDT_NTREES": "7"})


def test_relative_paths_resolve_against_config_dir(tmp_path):
    (tmp_path / "sub").mkdir()
    path = write_config(tmp_path / "sub" / "c.cfg", data__root="data", output__dir="out")
    cfg = load_config(path, environ={})
    assert cfg.data_root == tmp_path / "sub" / "data"
    assert cfg.output_dir == tmp_path / "sub" / "out"
    with pytest.raises(ConfigError, match="data.root"):
        cfg.validate_paths()


def test_written_config_round_trips(tmp_path):
    path = write_config(tmp_path / "c.cfg", gnn__mlp_sizes=(8, 4), data__source_markets=("s1", "s2"))
    cfg = load_config(path, environ={})
    assert cfg["gnn.mlp_sizes"] == (8, 4) and cfg["data.source_markets"] == ("s1", "s2")
    again = write_config(tmp_path / "d.cfg", gnn__mlp_sizes=(8, 4), data__source_markets=("s1", "s2"))
    assert path.read_text() == again.read_text()
    with pytest.raises(ConfigError):
        write_config(tmp_path / "e.cfg", gbdt__bogus=1)


def test_stage_hash_is_scoped_to_upstream_namespaces():
    cfg = load_config(CONFIG, environ={})
    changed = cfg.with_overrides(gbdt__n_trees=21)
    for stage in ("prepare", "recall", "embed", "gnn", "features"):
        assert stage_hash(cfg, stage) == stage_hash(changed, stage)
    for stage in ("gbdt", "ensemble", "eval"):
        assert stage_hash(cfg, stage) != stage_hash(changed, stage)
    reseeded = cfg.with_overrides(seed=1)
    assert all(stage_hash(cfg, s) != stage_hash(reseeded, s) for s in STAGES)


# --------------------------------------------------------------- synthetic

def test_bundled_fixture_is_reproducible(tmp_path):
    write_dataset(tmp_path, FIXTURE_SPEC)
    for path in sorted((FIXTURES / "synth50").rglob("*.tsv")):
        rel = path.relative_to(FIXTURES / "synth50")
        assert (tmp_path / rel).read_bytes() == path.read_bytes(), rel


def test_synthetic_structure():
    spec = SyntheticSpec(n_users=30, n_items=40, n_source_users=10, n_candidates=20, seed=5)
    markets = generate(spec)
    assert set(markets) == {"t1", "s1"}
    t1 = markets["t1"]
    for split in ("valid", "test"):
        run = t1["runs"][split]
        assert len(run) == 30
        assert all(len(c) == 20 and len(set(c)) == 20 for _, c in run.entries)
        cands = dict(run.entries)
        for (u, i), rel in t1["qrels"][split].items():
            assert rel == 1.0 and i in cands[u]
    seen = {(u, i) for u, i, _ in t1["train"]}
    assert not any(p in seen for s in ("valid", "test") for p in t1["qrels"][s])
    assert markets["s1"]["runs"] == {}


def test_synthetic_cli(tmp_path):
    from xmrank.synthetic import main
    assert main([str(tmp_path), "--users", "12", "--source-users", "4", "--candidates", "10"]) == 0
    run = parse_run(tmp_path / "t1" / "valid_run.tsv")
    assert len(run) == 12 and run.n_pairs() == 120


# --------------------------------------------------------------- pipeline

def test_all_stage_on_fixture_produces_submission_and_report(full_run):
    cfg, out = full_run
    for stage in STAGES:
        manifest = json.loads((out / stage / "manifest.json").read_text())
        assert manifest["config_hash"] == stage_hash(cfg, stage)
        for name in manifest["files"]:
            assert (out / stage / name).exists(), (stage, name)
    sub = (out / "ensemble" / "submission.tsv").read_text().splitlines()
    assert len(sub) == 50 * 50
    rows = [line.split("\t") for line in sub]
    assert all(len(r) == 3 for r in rows)
    for k in range(0, len(rows), 50):
        block = rows[k:k + 50]
        assert len({r[0] for r in block}) == 1
        scores = [float(r[2]) for r in block]
        assert scores == sorted(scores, reverse=True)
    report = (out / "eval" / "report.txt").read_text()
    assert "ensemble" in report and "NDCG@10" in report


def test_artifacts_embed_config_hash(full_run):
    cfg, out = full_run
    checked = 0
    for stage in ("prepare", "recall", "gnn", "features", "gbdt", "ensemble"):
        for path in sorted((out / stage).glob("*.tsv")):
            if path.name.startswith("submission"):
                continue
            first = path.read_text(encoding="utf-8").splitlines()[0]
            assert f"config_hash={stage_hash(cfg, stage)}" in first, path
            checked += 1
    for path in sorted((out / "embed").glob("*.bin")) + sorted((out / "gbdt").glob("*.bin")):
        assert stage_hash(cfg, path.parent.name).encode() in path.read_bytes()
        checked += 1
    assert checked > 20


def test_submission_has_no_comment_lines(full_run):
    _, out = full_run
    for name in ("submission.tsv", "submission_run.tsv"):
        assert not any(line.startswith("#") for line in (out / "ensemble" / name).read_text().splitlines())


def test_missing_upstream_names_the_stage(out_env, caplog):
    with caplog.at_level(logging.ERROR):
        assert cli.main(["gbdt", "--config", str(CONFIG)]) == cli.EXIT_MISSING
    assert "features" in caplog.text
    cfg = load_config(CONFIG)
    with pytest.raises(MissingArtifactError, match="'features'"):
        Pipeline(cfg).run("gbdt")
    assert UPSTREAM["gbdt"] == ("features",)


def test_changed_config_is_refused_unless_forced(out_env, monkeypatch, caplog):
    assert cli.main(["prepare", "--config", str(CONFIG)]) == cli.EXIT_OK
    monkeypatch.setenv("XMRANK_DATA_RUN_LENGTH", "0")
    with caplog.at_level(logging.ERROR):
        assert cli.main(["recall", "--config", str(CONFIG)]) == cli.EXIT_MISMATCH
    assert "--force" in caplog.text
    with pytest.raises(ConfigMismatchError):
        Pipeline(load_config(CONFIG)).run("recall")
    assert cli.main(["recall", "--config", str(CONFIG), "--force"]) == cli.EXIT_OK


def test_stage_rerun_reuses_upstream(out_env):
    cfg = load_config(CONFIG)
    pipe = Pipeline(cfg)
    for stage in ("prepare", "recall"):
        pipe.run(stage)
    before = (out_env / "recall" / "itemcf.valid.tsv").read_bytes()
    Pipeline(cfg).run("recall")
    assert (out_env / "recall" / "itemcf.valid.tsv").read_bytes() == before


def test_logs_wall_time_and_rows(out_env, caplog):
    with caplog.at_level(logging.INFO, logger="xmrank"):
        assert cli.main(["prepare", "--config", str(CONFIG)]) == cli.EXIT_OK
    line = next(r.getMessage() for r in caplog.records if r.getMessage().startswith("stage=prepare"))
    assert "wall=" in line and "merged:" in line and "valid_users:50" in line


def test_missing_data_root_is_a_config_error(tmp_path, monkeypatch):
    monkeypatch.setenv("XMRANK_DATA_ROOT", str(tmp_path / "nowhere"))
    monkeypatch.setenv("XMRANK_OUTPUT_DIR", str(tmp_path / "out"))
    assert cli.main(["prepare", "--config", str(CONFIG)]) == cli.EXIT_CONFIG


def test_seed_flag_changes_hash(out_env):
    assert cli.main(["prepare", "--config", str(CONFIG), "--seed", "4"]) == cli.EXIT_OK
    manifest = json.loads((out_env / "prepare" / "manifest.json").read_text())
    assert manifest["config_hash"] == stage_hash(load_config(CONFIG, seed=4), "prepare")
    assert manifest["config_hash"] != stage_hash(load_config(CONFIG), "prepare")


def test_two_runs_give_byte_identical_submission(tmp_path):
    subs = []
    for name in ("a", "b"):
        cfg = load_config(CONFIG, environ={"XMRANK_OUTPUT_DIR": str(tmp_path / name)})
        Pipeline(cfg).run("all")
        subs.append((tmp_path / name / "ensemble" / "submission.tsv").read_bytes())
    assert subs[0] == subs[1]


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "xmrank", "--help"], capture_output=True, text=True, check=True)
    assert "--config" in res.stdout and "all" in res.stdout
