import math

import numpy as np
import pytest

from mtse import evalsuite as E
from mtse.errors import DegenerateError, InputError
from mtse.model import ModelConfig

from conftest import tiny_model, tiny_task_suite

# cos = [1, 0, 1/sqrt2, -1, 1/2], gold = [5, 1, 4, 0, 3]
# Sxy = 26/5 + 7 sqrt2/10, Sxx = 13/5 - sqrt2/10, Syy = 86/5
STS_U = np.array([[1.0, 0.0]] * 5)
STS_V = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.0], [1.0, math.sqrt(3.0)]])
STS_GOLD = [5.0, 1.0, 4.0, 0.0, 3.0]
STS_R = (26 / 5 + 7 * math.sqrt(2) / 10) / math.sqrt((13 / 5 - math.sqrt(2) / 10) * 86 / 5)


@pytest.fixture(scope="module")
def model():
    return tiny_model(tiny_task_suite(), ModelConfig(emb_dim=5, H_enc=4, H_dec=3, head_hidden=[6]), seed=3,
                      jitter=0.3)


def sentences(n, seed=0, vocab=8):
    r = np.random.default_rng(seed)
    return [[f"w{int(j)}" for j in r.integers(0, vocab, r.integers(1, 7))] for _ in range(n)]


def test_encode_corpus_batch_independent(model):
    s = sentences(100)
    one = E.encode_corpus(model, s, batch_size=1).values
    many = E.encode_corpus(model, s, batch_size=32).values
    assert np.max(np.abs(one - many)) < 1e-10
    perm = np.random.default_rng(1).permutation(100)
    np.testing.assert_array_equal(E.encode_corpus(model, [s[i] for i in perm], batch_size=1).values, one[perm])


def test_encode_corpus_unk_and_empty(model):
    a = E.encode_corpus(model, [["zzz", "w1"]]).values
    b = E.encode_corpus(model, [["<unk>", "w1"]]).values
    assert np.array_equal(a, b)
    with pytest.raises(InputError):
        E.encode_corpus(model, [["w1"], []])


def test_evaluation_leaves_parameters_untouched(model):
    before = E.params_digest(model.params)
    s = sentences(40, 2)
    E.encode_corpus(model, s, "max")
    E.select_pooling(model, s, [len(x) % 2 for x in s])
    assert E.params_digest(model.params) == before


def test_concat_representations():
    r = np.random.default_rng(0)
    a = E.RepresentationMatrix(r.normal(size=(4, 3)), "last", "a")
    b = E.RepresentationMatrix(r.normal(size=(4, 2)), "max", "b")
    assert np.array_equal(E.concat_representations([a]).values, a.values)
    c = E.concat_representations([a, b])
    assert c.d == 5
    assert np.array_equal(c.values[:, :3], a.values) and np.array_equal(c.values[:, 3:], b.values)
    with pytest.raises(InputError):
        E.concat_representations([a, E.RepresentationMatrix(np.zeros((3, 2)))])


def test_representation_file_round_trip(tmp_path):
    rep = E.RepresentationMatrix(np.random.default_rng(0).normal(size=(3, 4)), "max")
    path = tmp_path / "r.rep"
    E.save_representations(str(path), rep)
    assert path.read_bytes().startswith(b"MTSE-REP v1 n=3 d=4 pooling=max\n")
    back = E.load_representations(str(path))
    assert np.array_equal(back.values, rep.values) and back.pooling == "max"


def blobs(n, seed):
    r = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = r.normal(size=(n, 3)) + 4.0 * y[:, None]
    return X, y


def test_logreg_separable_blobs():
    X, y = blobs(200, 0)
    Xt, yt = blobs(100, 1)
    res = E.logreg_cv_eval(X, y, test_X=Xt, test_y=yt)
    assert res.test_accuracy == 1.0 and res.cv_accuracy == 1.0
    assert res.best_l2 == min(E.L2_GRID)  # every l2 ties at 1.0


def test_logreg_permuted_labels_null_band():
    r = np.random.default_rng(3)
    X = r.normal(size=(600, 5))
    y = r.permutation(np.arange(600) % 2)
    Xt = r.normal(size=(500, 5))
    yt = r.permutation(np.arange(500) % 2)
    acc = E.logreg_cv_eval(X, y, test_X=Xt, test_y=yt).test_accuracy
    assert 0.4 <= acc <= 0.6


def test_logreg_huge_penalty_shrinks_to_majority():
    r = np.random.default_rng(4)
    X = r.normal(size=(90, 4))
    y = (np.arange(90) < 60).astype(int)
    y[:3] = 0
    clf = E.LogisticRegression(l2=1e9, max_iter=2000).fit(X, y)
    assert np.abs(clf.W).max() < 1e-6
    assert np.all(clf.predict(X) == 1)


def test_logreg_errors():
    with pytest.raises(DegenerateError):
        E.logreg_cv_eval(np.zeros((20, 2)), np.zeros(20))
    with pytest.raises(InputError):
        E.logreg_cv_eval(np.zeros((8, 2)), np.arange(8) % 2, folds=10)


def test_mlp_pair_eval_duplicate_detection():
    r = np.random.default_rng(5)
    n = 600
    U = r.normal(size=(n, 4))
    V = r.normal(size=(n, 4))
    y = np.arange(n) % 2
    V[y == 1] = U[y == 1]
    acc = E.mlp_pair_eval(U, V, y, E.MlpSpec(hidden=[32], dropout=0.0, epochs=30), seed=2)
    assert acc > 0.9
    assert acc == E.mlp_pair_eval(U, V, y, E.MlpSpec(hidden=[32], dropout=0.0, epochs=30), seed=2)


def test_mlp_zero_epochs_is_near_prior():
    r = np.random.default_rng(6)
    U, V = r.normal(size=(2000, 3)), r.normal(size=(2000, 3))
    y = np.arange(2000) % 2
    acc = E.mlp_pair_eval(U, V, y, E.MlpSpec(epochs=0), seed=1)
    assert abs(acc - 0.5) < 0.08


def test_pooling_choice_rule():
    assert E.choose_pooling({"last": 0.7, "max": 0.8}) == "max"
    assert E.choose_pooling({"last": 0.8, "max": 0.7}) == "last"
    assert E.choose_pooling({"last": 0.75, "max": 0.75}) == "last"


def test_length_bins_equal_population():
    lengths = np.random.default_rng(0).integers(1, 30, size=203)
    labels, edges = E.length_bins(lengths, 8)
    counts = np.bincount(labels, minlength=8)
    assert counts.max() - counts.min() <= 1 and counts.sum() == 203
    order = np.argsort(lengths, kind="stable")
    assert np.all(np.diff(labels[order]) >= 0)
    assert len(edges) == 8


def word_vec(w):
    return np.array([float(w[1:]), 1.0])


def test_content_probe_construction():
    s = sentences(300, 7)
    p = E.make_probe_dataset("content", s, np.zeros((300, 2)), word_vec=word_vec, seed=1)
    assert np.bincount(p.labels).tolist() == [len(p.labels) // 2] * 2
    for row, lab, g in zip(p.features, p.labels, p.groups):
        word = f"w{int(row[2])}"
        assert (word in s[g]) == bool(lab)


def test_order_probe_construction():
    s = sentences(300, 8)
    p = E.make_probe_dataset("order", s, np.zeros((300, 1)), word_vec=word_vec, seed=1)
    assert np.bincount(p.labels).tolist() == [len(p.labels) // 2] * 2
    for row, lab, g in zip(p.features, p.labels, p.groups):
        a, b = f"w{int(row[1])}", f"w{int(row[3])}"
        assert s[g].count(a) == 1 and s[g].count(b) == 1
        assert (s[g].index(a) < s[g].index(b)) == bool(lab)


def test_probe_missing_metadata_names_field():
    with pytest.raises(InputError, match="voice"):
        E.make_probe_dataset("passive", [["a"]], np.zeros((1, 2)), [{"tense": "past"}])


def test_probe_baselines_are_fifty_for_balanced_probes():
    s = sentences(400, 9)
    for kind in ("content", "order"):
        p = E.make_probe_dataset(kind, s, np.zeros((400, 3)), word_vec=word_vec, seed=2)
        assert E.run_probe(p, seed=3).baseline == 50.0


def test_probe_constant_and_oracle_features():
    r = np.random.default_rng(10)
    y = r.choice(3, size=500, p=[0.5, 0.3, 0.2])
    const = E.run_probe(E.ProbeDataset(np.ones((500, 4)), y, 3, "length"), seed=1)
    assert abs(const.accuracy - const.baseline) <= 2.0
    oracle = E.run_probe(E.ProbeDataset(np.eye(3)[y], y, 3, "length"), seed=1)
    assert oracle.accuracy == 100.0


def test_cosine_sts_fixture_and_identities():
    assert E.cosine_sts(STS_U, STS_V, STS_GOLD).pearson == pytest.approx(STS_R, abs=1e-12)
    r = np.random.default_rng(0)
    U, V = r.normal(size=(20, 3)), r.normal(size=(20, 3))
    cos, _ = E.cosine_rows(U, V)
    assert E.cosine_sts(U, V, cos).pearson == pytest.approx(1.0, abs=1e-12)
    assert E.cosine_sts(U, V, -cos).pearson == pytest.approx(-1.0, abs=1e-12)


def test_cosine_sts_zero_vector_and_degenerate():
    U = STS_U.copy()
    U[1] = 0.0
    res = E.cosine_sts(U, STS_V, STS_GOLD)
    assert res.n_zero_vectors == 1
    with pytest.raises(DegenerateError):
        E.cosine_sts(STS_U, STS_V, [1.0] * 5)


def brute_force(q, M, k, skip=None):
    cos = [(-(M[i] @ q) / (np.linalg.norm(M[i]) * np.linalg.norm(q)), i) for i in range(len(M)) if i != skip]
    return [i for _, i in sorted(cos)[:k]]


def test_nearest_neighbors_rules():
    I = np.eye(4)
    q = np.array([1.0, 0.1, 0.0, 0.0])
    assert E.nearest_neighbors(q, I, 2).tolist() == [0, 1]
    M = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    assert E.nearest_neighbors(M[0], M, 2).tolist() == [1, 3]
    tie = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    assert E.nearest_neighbors(np.array([1.0, 0.0]), tie, 2, query_index=0).tolist() == [1, 2]
    with pytest.raises(InputError):
        E.nearest_neighbors(np.zeros(2), M, 1)


def test_nearest_neighbors_random_fixture():
    M = np.random.default_rng(11).normal(size=(10, 4))
    for i in range(10):
        assert E.nearest_neighbors(M[i], M, 9).tolist() == brute_force(M[i], M, 9, skip=i)


def test_expand_vocab_identity_and_ridge_monotone():
    r = np.random.default_rng(1)
    toks = [f"t{i}" for i in range(1000)]
    T = r.normal(size=(1000, 8))
    res = E.expand_vocab(toks, T, toks, T)
    assert res.residual < 1e-8
    np.testing.assert_allclose(res.M, np.eye(8), atol=1e-6)
    toks, T = toks[:30], T[:30, :4]
    E2 = r.normal(size=(30, 3))
    res_l = [E.expand_vocab(toks, T, toks, E2, l2=l2).residual for l2 in (10.0, 1.0, 1e-2, 1e-6)]
    assert all(a >= b for a, b in zip(res_l, res_l[1:]))


def test_expand_vocab_keeps_shared_and_requires_overlap():
    pre = ["a", "b", "c", "new"]
    P = np.array([[1.0, 0], [0, 1.0], [1.0, 1.0], [2.0, 3.0]])
    res = E.expand_vocab(pre, P, ["a", "b", "c"], np.array([[5.0], [6.0], [7.0]]))
    assert res.table[:3, 0].tolist() == [5.0, 6.0, 7.0]
    with pytest.raises(InputError):
        E.expand_vocab(["x"], np.ones((1, 2)), ["y"], np.ones((1, 2)))


def test_token_accuracy_counts_missing_and_surplus_tokens():
    assert E.token_accuracy([["a", "b"]], [["a", "b"]]) == 1.0
    assert E.token_accuracy([["a", "x", "c"], ["a"]], [["a", "b"], ["a", "b"]]) == pytest.approx(2 / 5)
    with pytest.raises(InputError):
        E.token_accuracy([[]], [[]])
