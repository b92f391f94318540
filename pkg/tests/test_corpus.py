import math
from collections import Counter

import numpy as np
import pytest

from mtse import corpus as C
from mtse.errors import FormatError, InputError, IOFailure
from mtse.numcore import Rng


def test_build_vocab_frequency_and_threshold():
    v = C.build_vocab(["a a b"])
    assert v.tokens[:4] == list(C.SPECIALS)
    assert v.id("a") == 4 and v.id("b") == 5
    assert C.build_vocab(["a a b"], min_count=2).tokens == list(C.SPECIALS) + ["a"]
    assert v.id("zzz") == C.UNK


def test_build_vocab_tie_rule_by_enumeration():
    # every ordering of an equal-count corpus yields lexicographic ids
    import itertools
    for perm in itertools.permutations(["b", "a", "c"]):
        assert C.build_vocab([" ".join(perm)]).tokens[4:] == ["a", "b", "c"]


def test_build_vocab_errors_and_truncation():
    with pytest.raises(InputError):
        C.build_vocab([""])
    with pytest.raises(InputError):
        C.build_vocab(["a"], max_size=4)
    assert len(C.build_vocab(["a b c d e f"], max_size=6)) == 6


def test_build_vocab_idempotent():
    ds = C.gen_cipher_task(0, n=50)
    lines = [" ".join(s) for s in ds.source_sentences()]
    v = C.build_vocab(lines)
    again = C.build_vocab([" ".join(v.tokens[4:])])
    assert set(again.tokens) == set(v.tokens)


def test_batchify_sizes_and_determinism():
    ds = C.gen_cipher_task(0, n=5)
    enc = C.encode_dataset(ds, C.build_vocab(ds.source_sentences()), C.build_vocab(ds.target_sentences()))
    batches = C.batchify(enc, 2, Rng(3))
    assert [b[0].size for b in batches] == [2, 2, 1]
    again = C.batchify(enc, 2, Rng(3))
    assert all(np.array_equal(a[0].ids, b[0].ids) for a, b in zip(batches, again))
    for src, tgt in batches:
        assert src.ids.shape[1] == src.lengths.max()
        assert tgt.ids.shape[1] == tgt.lengths.max()


def test_cipher_definition_and_reverse():
    fwd = C.gen_cipher_task(4, vocab_size=10, n=20)
    rev = C.gen_cipher_task(4, vocab_size=10, n=20, reverse=True)
    m = fwd.info["mapping"]
    assert sorted(m.values()) == sorted(set(m.values()))
    assert not set(m) & set(m.values())
    for (s, t), (s2, t2) in zip(fwd.examples, rev.examples):
        assert s == s2
        assert t == [m[w] for w in s]
        assert t2 == t[::-1]


def test_cipher_token_frequencies_uniform():
    ds = C.gen_cipher_task(8, vocab_size=64, n=100_000, length_range=(1, 1))
    counts = Counter(s[0] for s, _ in ds.examples)
    k = 60
    expected = 100_000 / k
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    # chi-square with 59 dof: mean 59, sd sqrt(118); 3 sigma band
    assert len(counts) == k
    assert chi2 < 59 + 3 * math.sqrt(118)


def test_books_pairs_and_boundaries():
    stn, stp = C.gen_books(1, n_books=3, sentences_per_book=2)
    assert len(stn) == 3 and len(stp) == 3
    assert [(b, a) for a, b in stn.examples] == stp.examples
    stn, _ = C.gen_books(1, n_books=4, sentences_per_book=5)
    assert len(stn) == 16
    with pytest.raises(InputError):
        C.gen_books(1, sentences_per_book=1)


def test_books_adjacent_overlap_exceeds_random():
    stn, _ = C.gen_books(2, n_books=60, sentences_per_book=20)
    pairs = stn.examples[:1000]
    rng = Rng(0)

    def overlap(a, b):
        return len(set(a) & set(b)) / len(set(a) | set(b))

    adjacent = np.mean([overlap(a, b) for a, b in pairs])
    sents = [a for a, _ in stn.examples]
    rand = np.mean([overlap(sents[int(rng.integers(len(sents)))], sents[int(rng.integers(len(sents)))])
                    for _ in range(1000)])
    assert adjacent > rand


def test_pcfg_single_rule():
    ds = C.gen_pcfg_parsing(0, {"S": [(1.0, ("hi",), {})]}, n=3)
    assert all(t == "( S hi )".split() and s == ["hi"] for s, t in ds.examples)


def test_pcfg_targets_round_trip_and_metadata():
    ds = C.gen_pcfg_parsing(5, n=500)
    classes = ds.info["tss_classes"]
    for (src, tgt), meta in zip(ds.examples, ds.metadata):
        tree = C.delinearize(tgt)
        assert C.tree_yield(tree) == src
        assert meta["length"] == len(src)
        assert meta["voice"] in ("active", "passive")
        assert meta["tense"] in ("past", "present")
        passive = any(w in ("was", "is") for w in src)
        assert (meta["voice"] == "passive") == passive
        assert classes[meta["tss"]] == " ".join(c[0] for c in tree[1])
    assert {m["voice"] for m in ds.metadata} == {"active", "passive"}
    assert len({m["tss"] for m in ds.metadata}) == len(classes)


def test_delinearize_rejects_malformed():
    for bad in ["( S ( NP a )", "S a )", "( S a ) )", "( ( a ) )", "( S )"]:
        assert not C.is_well_formed(bad.split())


def test_nli_rules_and_balance():
    ds = C.gen_nli(3, n=301)
    ant = ds.info["antonyms"]
    counts = Counter(y for _, _, y in ds.examples)
    assert counts[0] == counts[1] == 100 and counts[2] == 101
    for p, h, y in ds.examples:
        if y == 0:
            assert len(h) < len(p)
            assert any(p[i:i + len(h)] == h for i in range(len(p)))
        elif y == 1:
            diff = [i for i in range(len(p)) if p[i] != h[i]]
            assert len(h) == len(p) and len(diff) == 1 and ant[p[diff[0]]] == h[diff[0]]


def test_nli_antonym_example():
    ds = C.gen_nli(0, n=3, sampler=lambda rng: ["a", "hot", "c"], antonyms={"hot": "cold", "cold": "hot"})
    got = {y: h for _, h, y in ds.examples}
    assert got[1] == ["a", "cold", "c"]
    assert got[0] in (["a", "hot"], ["hot", "c"])


def test_generators_are_pure():
    assert C.gen_cipher_task(3, n=30).examples == C.gen_cipher_task(3, n=30).examples
    assert C.gen_books(3, n_books=3)[0].examples == C.gen_books(3, n_books=3)[0].examples
    assert C.gen_pcfg_parsing(3, n=30).examples == C.gen_pcfg_parsing(3, n=30).examples
    assert C.gen_nli(3, n=30).examples == C.gen_nli(3, n=30).examples


def test_synthetic_tokens_all_in_vocabulary():
    ds = C.gen_cipher_task(0, n=200)
    v = C.build_vocab(ds.source_sentences())
    assert all(C.UNK not in v.encode(s) for s in ds.source_sentences())


def test_load_parallel_tsv(tmp_path):
    f = tmp_path / "p.tsv"
    f.write_bytes(b"a b\tc d\r\n\r\ne\tf\n")
    ds = C.load_parallel_tsv(str(f))
    assert ds.examples == [(["a", "b"], ["c", "d"]), (["e"], ["f"])]
    assert ds.skipped_lines == 1


def test_load_lines_crlf_and_blank(tmp_path):
    f = tmp_path / "l.txt"
    f.write_bytes(b"x y\r\n\r\nz\r\n")
    seqs, skipped = C.load_lines(str(f))
    assert seqs == [["x", "y"], ["z"]] and skipped == 1


def test_load_errors(tmp_path):
    with pytest.raises(IOFailure, match="missing.tsv"):
        C.load_parallel_tsv(str(tmp_path / "missing.tsv"))
    f = tmp_path / "bad.tsv"
    f.write_text("a\tb\nonly-one-column\n")
    with pytest.raises(FormatError, match=":2:"):
        C.load_parallel_tsv(str(f))


def test_nli_tsv_round_trip(tmp_path):
    ds = C.gen_nli(1, n=9)
    path = tmp_path / "nli.tsv"
    C.save_parallel_tsv(ds, str(path))
    back = C.load_parallel_tsv(str(path), name="nli", kind=C.PAIR)
    assert back.examples == ds.examples


def test_manifest_round_trip(tmp_path):
    C.write_manifest(str(tmp_path / "m.json"), [{"name": "fr", "kind": "seq2seq", "weight": 1.0,
                                                 "files": {"train": "fr.tsv"}}])
    entries = C.read_manifest(str(tmp_path / "m.json"))
    assert entries[0]["files"]["train"] == str(tmp_path / "fr.tsv")


def test_nli_sampler_without_antonyms_is_an_error():
    with pytest.raises(InputError, match="antonym"):
        C.gen_nli(0, n=3, sampler=C.uniform_sentence_sampler(12))
