import numpy as np
import pytest

from conftest import random_index
from xmrank.dataset_io import InteractionTable, build_index
from xmrank.embeddings import (
    DeepWalk,
    EmbeddingTable,
    TfidfSvd,
    WalkCorpus,
    Word2Vec,
    generate_walks,
    sgns_corpus_loss,
    sgns_loss_and_grad,
    tfidf_matrix,
    tfidf_svd,
    train_sgns,
    truncated_svd,
    user_sequences,
)


def test_user_sequences_store_order_and_token_count():
    rows = [("u1", "a", 1), ("u1", "b", 1), ("u1", "c", 1), ("u2", "b", 1)]
    _, ix = build_index(InteractionTable.from_rows(rows))
    corpus = user_sequences(ix)
    assert [s.tolist() for s in corpus.sequences] == [[0, 1, 2], [1]]
    assert corpus.n_tokens == ix.nnz


def test_user_sequences_stable_across_runs(tmp_path):
    ix1, ix2 = random_index(3), random_index(3)
    a = b"".join(s.tobytes() for s in user_sequences(ix1).sequences)
    b = b"".join(s.tobytes() for s in user_sequences(ix2).sequences)
    assert a == b


def test_walk_len_one_and_corpus_size():
    ix = random_index(1, 8, 6)
    corpus = generate_walks(ix, num_walks=3, walk_len=1, seed=0)
    n = ix.n_users + ix.n_items
    assert len(corpus) == 3 * n
    assert [int(s[0]) for s in corpus.sequences[:n]] == list(range(n))
    assert all(len(s) == 1 for s in corpus.sequences)


def test_two_node_walk_alternates():
    _, ix = build_index(InteractionTable.from_rows([("u", "i", 1)]))
    corpus = generate_walks(ix, num_walks=1, walk_len=4, seed=7)
    assert corpus.sequences[0].tolist() == [0, 1, 0, 1]
    assert corpus.sequences[1].tolist() == [1, 0, 1, 0]


def test_walks_follow_edges_and_are_bipartite():
    ix = random_index(2, 10, 8, 0.3)
    corpus = generate_walks(ix, num_walks=2, walk_len=6, seed=1)
    M = ix.n_users
    B = ix.binary().toarray() > 0
    for s in corpus.sequences:
        assert len(s) == 6
        for a, b in zip(s[:-1], s[1:]):
            assert (a < M) != (b < M)
            u, i = (a, b - M) if a < M else (b, a - M)
            assert B[u, i]


def test_walks_deterministic_given_seed():
    ix = random_index(4)
    a, b = generate_walks(ix, 2, 5, seed=3), generate_walks(ix, 2, 5, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a.sequences, b.sequences))


def test_sgns_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    V, d, B, K = 7, 4, 5, 3
    w_in = rng.normal(scale=0.5, size=(V, d))
    w_out = rng.normal(scale=0.5, size=(V, d))
    c = rng.integers(0, V, B)
    o = rng.integers(0, V, B)
    neg = rng.integers(0, V, (B, K))
    _, g_c, g_o, g_n = sgns_loss_and_grad(w_in, w_out, c, o, neg)
    grad_in = np.zeros_like(w_in)
    grad_out = np.zeros_like(w_out)
    np.add.at(grad_in, c, g_c)
    np.add.at(grad_out, o, g_o)
    np.add.at(grad_out, neg.ravel(), g_n.reshape(-1, d))

    h = 1e-6
    picks = [(0, r, k) for r, k in zip(rng.integers(0, V, 10), rng.integers(0, d, 10))]
    picks += [(1, r, k) for r, k in zip(rng.integers(0, V, 10), rng.integers(0, d, 10))]
    for which, r, k in picks:
        mats = [w_in.copy(), w_out.copy()]
        mats[which][r, k] += h
        up = sgns_loss_and_grad(mats[0], mats[1], c, o, neg)[0]
        mats[which][r, k] -= 2 * h
        down = sgns_loss_and_grad(mats[0], mats[1], c, o, neg)[0]
        fd = (up - down) / (2 * h)
        analytic = (grad_in, grad_out)[which][r, k]
        assert abs(fd - analytic) <= 1e-4 * max(abs(fd), abs(analytic), 1e-8) or abs(fd - analytic) < 1e-9


def _toy_corpus():
    # 0 and 1 always share a sentence with fillers 2..10; 11..19 live in separate sentences
    rng = np.random.default_rng(5)
    seqs = []
    for k in range(80):
        if k % 2 == 0:
            seq = np.concatenate([[0, 1], rng.choice(np.arange(2, 11), size=4, replace=False)])
        else:
            seq = rng.choice(np.arange(11, 20), size=6, replace=False)
        seqs.append(rng.permutation(seq).astype(np.int64))
    return WalkCorpus(seqs)


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_sgns_cooccurring_tokens_closer():
    corpus = _toy_corpus()
    w_in, _ = train_sgns(corpus, 20, dim=16, window=5, negatives=5, epochs=50, lr=0.05, seed=0)
    pair = _cos(w_in[0], w_in[1])
    rng = np.random.default_rng(1)
    for t in rng.choice(np.arange(11, 20), size=5, replace=False):
        assert pair > _cos(w_in[0], w_in[t])


def test_sgns_loss_decreases_and_determinism():
    corpus = _toy_corpus()
    rng = np.random.default_rng(0)
    init_in = (rng.random((20, 8)) - 0.5) / 8
    before = sgns_corpus_loss(init_in, np.zeros((20, 8)), corpus, 3, 5)
    w_in, w_out = train_sgns(corpus, 20, dim=8, window=3, epochs=10, seed=0)
    after = sgns_corpus_loss(w_in, w_out, corpus, 3, 5)
    assert after < before
    again, _ = train_sgns(corpus, 20, dim=8, window=3, epochs=10, seed=0)
    assert w_in.tobytes() == again.tobytes()


def test_sgns_argument_errors():
    with pytest.raises(ValueError):
        train_sgns(_toy_corpus(), 20, dim=0)
    with pytest.raises(ValueError):
        train_sgns(WalkCorpus([]), 20)


def test_idf_zero_for_universal_item():
    rows = [(f"u{k}", "pop", 1) for k in range(4)] + [("u0", "rare", 1)]
    _, ix = build_index(InteractionTable.from_rows(rows))
    X = tfidf_matrix(ix).toarray()
    assert np.all(X[:, 0] == 0)
    assert X[0, 1] == pytest.approx(np.log(4))


def test_rank_one_reconstruction():
    X = np.outer([1.0, 2.0, 0.5, -1.0, 3.0], [2.0, -1.0, 0.0, 4.0])
    U, s, Vt = truncated_svd(X, 1, seed=0)
    np.testing.assert_allclose((U * s) @ Vt, X, atol=1e-8)


def test_full_rank_matches_dense_svd_oracle():
    rng = np.random.default_rng(2)
    for shape in [(8, 8), (6, 4), (3, 7)]:
        X = rng.normal(size=shape)
        d = min(shape)
        U, s, Vt = truncated_svd(X, d, seed=1)
        s_dense = np.linalg.svd(X, compute_uv=False)
        assert np.linalg.norm((U * s) @ Vt - X) < 1e-8
        np.testing.assert_allclose(s, s_dense, atol=1e-10)
        assert np.all(np.diff(s) <= 1e-12)


def test_svd_dim_validation():
    with pytest.raises(ValueError):
        truncated_svd(np.ones((3, 2)), 3)


def test_tfidf_svd_tables(tmp_path):
    ix = random_index(5, 12, 9, 0.4)
    u, i = tfidf_svd(ix, dim=4, seed=0)
    assert u.vectors.shape == (ix.n_users, 4) and i.vectors.shape == (ix.n_items, 4)
    with pytest.raises(ValueError):
        tfidf_svd(ix, dim=50)
    u2, _ = tfidf_svd(ix, dim=4, seed=0)
    assert u.vectors.tobytes() == u2.vectors.tobytes()


@pytest.mark.parametrize("model", [TfidfSvd(dim=4), Word2Vec(dim=6, epochs=2),
                                   DeepWalk(dim=6, num_walks=2, walk_len=5, epochs=2)])
def test_embedder_shapes_and_finiteness(model):
    ix = random_index(6, 12, 9, 0.4)
    model.fit(ix)
    u, i = model.tables
    assert u.vectors.shape[0] == ix.n_users and i.vectors.shape[0] == ix.n_items
    assert u.method == i.method == model.method
    assert np.all(np.isfinite(u.vectors)) and np.all(np.isfinite(i.vectors))
    assert model.transform([0, 1], "item").shape == (2, i.dim)


def test_embedding_binary_roundtrip(tmp_path):
    ix = random_index(7)
    table = Word2Vec(dim=5, epochs=1, seed=3).fit(ix).user_table_
    path = tmp_path / "w2v.user.bin"
    table.save(path)
    back = EmbeddingTable.load(path)
    assert (back.method, back.entity, back.seed) == ("word2vec", "user", 3)
    np.testing.assert_array_equal(back.vectors, table.vectors.astype(np.float32))
    table.save(tmp_path / "again.bin")
    assert path.read_bytes() == (tmp_path / "again.bin").read_bytes()
    table.export_tsv(tmp_path / "w2v.tsv", ix.ids)
    lines = (tmp_path / "w2v.tsv").read_text().splitlines()
    assert len(lines) == ix.n_users and len(lines[0].split("\t")) == 6


def test_embedding_table_validation():
    with pytest.raises(ValueError):
        EmbeddingTable("glove", "user", np.zeros((2, 2)))
    with pytest.raises(ValueError):
        EmbeddingTable("word2vec", "user", np.array([[np.nan]]))
