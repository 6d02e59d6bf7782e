import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_index
from xmrank.dataset_io import CandidateLists, InteractionTable, build_index
from xmrank.embeddings import EmbeddingTable
from xmrank.features import (
    MISSING,
    EmbeddingFamily,
    FeatureMatrix,
    assemble,
    distance_features,
    item_stats,
    user_stats,
)
from xmrank.scores import ScoreList


def _naive_stats(ratings):
    return [len(ratings), len(ratings), min(ratings), statistics.median(ratings), max(ratings),
            statistics.fmean(ratings), statistics.pstdev(ratings)]


def test_user_stats_hand_example():
    _, ix = build_index(InteractionTable.from_rows([("u", "a", 1), ("u", "b", 5), ("v", "a", 4)]))
    s = user_stats(ix)
    np.testing.assert_array_equal(s.lookup(["u"])[0], [2, 2, 1, 3, 5, 3, 2.0])
    assert s.lookup(["v"])[0][-1] == 0.0


def test_item_stats_single_rating():
    _, ix = build_index(InteractionTable.from_rows([("u", "a", 4), ("u", "b", 2), ("v", "b", 3)]))
    row = item_stats(ix).lookup(["a"])[0]
    assert row[0] == 1 and row[5] == 4 and row[6] == 0


def test_stats_match_naive_recomputation():
    for seed in range(5):
        ix = random_index(seed, 40, 35, 0.25)
        us, its = user_stats(ix), item_stats(ix)
        for u in range(ix.n_users):
            ratings = ix.user_items.getrow(u).data.tolist()
            np.testing.assert_allclose(us.values[u], _naive_stats(ratings), rtol=1e-12, atol=1e-12)
        rng = np.random.default_rng(seed)
        for i in rng.choice(ix.n_items, size=min(30, ix.n_items), replace=False):
            ratings = ix.item_users.getrow(i).data.tolist()
            np.testing.assert_allclose(its.values[i], _naive_stats(ratings), rtol=1e-12, atol=1e-12)
        assert us.values[:, 0].sum() == its.values[:, 0].sum() == ix.nnz


def test_cold_entity_stats():
    _, ix = build_index(InteractionTable.from_rows([("u", "a", 4)]))
    row = user_stats(ix).lookup(["nobody"])[0]
    assert row[0] == 0 and row[1] == 0 and np.all(row[2:] == MISSING)


def test_distance_identical_vectors():
    v = [0.3, -1.2, 2.0]
    got = distance_features(v, v)
    np.testing.assert_allclose(got, (0, 0, 1, 0, 1), atol=1e-12)


def test_distance_orthogonal_hand_values():
    cos, man, ruz, euc, _ = distance_features([1, 0], [0, 1])
    assert cos == pytest.approx(1.0)
    assert man == 2.0
    assert euc == pytest.approx(math.sqrt(2), abs=1e-12)
    assert ruz == 0.0


def test_distance_sentinels():
    assert distance_features([0, 0, 0], [1, 2, 3])[0] == 1.0
    assert distance_features([1, 2, 3], [5, 5, 5])[4] == 0.0
    with pytest.raises(ValueError):
        distance_features([1.0], [2.0])
    with pytest.raises(ValueError):
        distance_features([1.0, 2.0], [1.0, 2.0, 3.0])


def test_distance_against_scipy():
    from scipy.spatial import distance
    rng = np.random.default_rng(0)
    for _ in range(50):
        u, v = rng.normal(size=(2, 8))
        cos, man, ruz, euc, pear = distance_features(u, v)
        assert cos == pytest.approx(distance.cosine(u, v), abs=1e-12)
        assert man == pytest.approx(distance.cityblock(u, v), abs=1e-12)
        assert euc == pytest.approx(distance.euclidean(u, v), abs=1e-12)
        assert pear == pytest.approx(1 - distance.correlation(u, v), abs=1e-12)
        assert ruz == pytest.approx(np.minimum(abs(u), abs(v)).sum() / np.maximum(abs(u), abs(v)).sum())


vec = arrays(np.float64, 6, elements=st.floats(-1e3, 1e3, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(vec, vec)
def test_distance_symmetric(u, v):
    assert distance_features(u, v) == distance_features(v, u)


def _family(ix, dim=3, seed=0, method="word2vec"):
    rng = np.random.default_rng(seed)
    ut = EmbeddingTable(method, "user", rng.normal(size=(ix.n_users, dim)))
    it = EmbeddingTable(method, "item", rng.normal(size=(ix.n_items, dim)))
    return EmbeddingFamily.from_tables(ut, it, ix.ids)


def test_assemble_shape_and_missing_score():
    run = CandidateLists([("u1", ["a", "b", "c"])])
    s1 = ScoreList("itemcf", {("u1", "a"): 0.5, ("u1", "b"): 0.2, ("u1", "c"): 0.1})
    s2 = ScoreList("swing", {("u1", "a"): 1.0})
    fm = assemble(run, [s1, s2])
    assert fm.shape == (3, 2) and fm.groups.tolist() == [3]
    np.testing.assert_array_equal(fm.column("score.swing"), [1.0, 0.0, 0.0])


def test_assemble_column_count_and_order():
    ix = random_index(1, 12, 10, 0.4)
    fams = [_family(ix, method=m) for m in ("tfidf_svd", "word2vec", "deepwalk")]
    names = ix.ids.user_ids[:3]
    run = CandidateLists([(u, list(ix.ids.item_ids[:4])) for u in names])
    scores = [ScoreList(n, {}) for n in ("itemcf", "usercf", "swing", "gnn")]
    fm = assemble(run, scores, (user_stats(ix), item_stats(ix)), fams)
    assert len(fm.columns) == 4 + 7 + 7 + 5 * 3
    assert fm.columns[:5] == ["score.itemcf", "score.usercf", "score.swing", "score.gnn", "user.count"]
    assert fm.columns[-1] == "dist.deepwalk.pearson"
    assert "dist.word2vec.ruzicka_jaccard" in fm.columns
    assert fm.groups.tolist() == [4, 4, 4] and len(fm) == 12


def test_assemble_embedding_rows_match_direct_computation():
    ix = random_index(2, 10, 8, 0.4)
    fam = _family(ix, dim=4)
    run = CandidateLists([(ix.ids.user_ids[1], [ix.ids.item_ids[2], "unknown_item"])])
    fm = assemble(run, [], None, [fam])
    want = distance_features(fam.user_vectors[1], fam.item_vectors[2])
    np.testing.assert_allclose(fm.values[0], want, rtol=1e-12)
    assert np.all(fm.values[1] == MISSING)


def test_conflicting_column_names():
    run = CandidateLists([("u", ["a"])])
    with pytest.raises(ValueError):
        assemble(run, [ScoreList("x", {}), ScoreList("x", {})])


def test_serialization_roundtrip_and_determinism(tmp_path):
    ix = random_index(3, 10, 9, 0.4)
    run = CandidateLists([(u, list(ix.ids.item_ids[:5])) for u in ix.ids.user_ids[:4]])
    rng = np.random.default_rng(3)
    scores = [ScoreList.from_flat("m", run, rng.normal(size=run.n_pairs()) / 3)]
    args = (run, scores, (user_stats(ix), item_stats(ix)), [_family(ix)])
    a, b = assemble(*args), assemble(*args)
    a.save(tmp_path / "a.tsv", comment="config=abc")
    b.save(tmp_path / "b.tsv", comment="config=abc")
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    back = FeatureMatrix.load(tmp_path / "a.tsv")
    assert list(back.pairs()) == list(run.pairs())
    assert back.columns == a.columns
    np.testing.assert_array_equal(back.values, a.values)
    np.testing.assert_array_equal(back.groups, a.groups)


def test_feature_matrix_invariants():
    with pytest.raises(ValueError):
        FeatureMatrix(["u"], ["a"], ["c"], [[1.0]], [2])
    with pytest.raises(ValueError):
        FeatureMatrix(["u"], ["a"], ["c", "c"], [[1.0, 2.0]], [1])
    fm = FeatureMatrix(["u"], ["a"], ["c", "d"], [[1.0, 2.0]], [1])
    assert fm.select(["d", "c"]).tolist() == [[2.0, 1.0]]
    with pytest.raises(KeyError):
        fm.select(["e"])
