import math

import numpy as np
import pytest

from mtse.corpus import EOS
from mtse.decoder import (cond_gru_step, decoder_init, decoder_loss, decoder_view, greedy_decode,
                          init_decoder, teacher_forced_loss)
from mtse.encoder import SentenceBatch, gru_cell_step
from mtse.errors import InputError
from mtse.numcore import Rng, finite_diff_grad, relative_error

V, E, H, R = 8, 3, 4, 6


def dec_params(seed=0, scale=0.3):
    rng = Rng(seed)
    p = init_decoder(rng, V, E, H, R, "dec.t")
    for v in p.values():
        v += rng.uniform(-scale, scale, v.shape)
    return p


def test_zero_conditioning_matches_plain_gru_bitwise():
    dec = decoder_view(dec_params(), "dec.t")
    for g in "rzd":
        dec[f"C_{g}"] = np.zeros_like(dec[f"C_{g}"])
    r = np.random.default_rng(0)
    x, h, hx = r.normal(size=(3, E)), r.normal(size=(3, H)), r.normal(size=(3, R))
    assert np.array_equal(cond_gru_step(x, h, hx, dec), gru_cell_step(x, h, dec))


def test_closed_update_gate_keeps_state():
    dec = decoder_view(dec_params(), "dec.t")
    dec["b_z"] = np.full(H, -1e6)
    r = np.random.default_rng(1)
    x, h, hx = r.normal(size=(2, E)), r.normal(size=(2, H)), r.normal(size=(2, R))
    np.testing.assert_allclose(cond_gru_step(x, h, hx, dec), h, atol=1e-12)


def test_cond_gru_matches_scalar_oracle():
    rng = Rng(4)
    p = init_decoder(rng, 5, 2, 2, 2, "d")
    for v in p.values():
        v += rng.uniform(-0.5, 0.5, v.shape)
    dec = decoder_view(p, "d")
    x, h, hx = [0.4, -0.2], [0.3, -0.8], [1.1, 0.5]

    def pre(g, inp, j):
        s = dec[f"b_{g}"][j]
        s += sum(x[k] * dec[f"W_{g}"][k, j] for k in range(2))
        s += sum(inp[k] * dec[f"U_{g}"][k, j] for k in range(2))
        s += sum(hx[k] * dec[f"C_{g}"][k, j] for k in range(2))
        return s

    sig = lambda a: 1 / (1 + math.exp(-a))
    r = [sig(pre("r", h, j)) for j in range(2)]
    z = [sig(pre("z", h, j)) for j in range(2)]
    c = [math.tanh(pre("d", [r[k] * h[k] for k in range(2)], j)) for j in range(2)]
    want = [(1 - z[j]) * h[j] + z[j] * c[j] for j in range(2)]
    got = cond_gru_step(np.array([x]), np.array([h]), np.array([hx]), dec)[0]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_decoder_init_examples():
    dec = decoder_view(dec_params(), "dec.t")
    hx = np.random.default_rng(0).normal(size=(2, R))
    dec["W_init"] = np.zeros((R, H))
    dec["b_init"] = np.zeros(H)
    assert not decoder_init(hx, dec).any()
    dec["b_init"] = np.array([0.5, -1.0, 0.0, 2.0])
    np.testing.assert_allclose(decoder_init(hx, dec), np.tile(np.tanh(dec["b_init"]), (2, 1)))
    dec2 = {"W_init": np.array([[1.0, 0.0], [2.0, -1.0]]), "b_init": np.array([0.0, 0.5])}
    out = decoder_init(np.array([[0.5, 0.25]]), dec2)
    np.testing.assert_allclose(out, [[math.tanh(1.0), math.tanh(0.25)]], atol=1e-15)


def target(seqs, width=None):
    return SentenceBatch.from_sequences(seqs, min_width=width)


def test_zero_parameters_give_uniform_loss():
    p = {k: np.zeros_like(v) for k, v in dec_params().items()}
    hx = np.random.default_rng(0).normal(size=(2, R))
    assert teacher_forced_loss(hx, target([[4, 5], [6]]), p, "dec.t") == pytest.approx(math.log(V), abs=1e-14)


def test_loss_invariant_to_pad_extension_and_row_order():
    p = dec_params()
    hx = np.random.default_rng(0).normal(size=(3, R))
    seqs = [[4, 5, 6], [7], [5, 5]]
    base = teacher_forced_loss(hx, target(seqs), p, "dec.t")
    assert abs(teacher_forced_loss(hx, target(seqs, 9), p, "dec.t") - base) < 1e-12
    perm = [2, 0, 1]
    permuted = teacher_forced_loss(hx[perm], target([seqs[i] for i in perm]), p, "dec.t")
    assert abs(permuted - base) < 1e-12


def test_two_token_target_step_by_step_trace():
    p = dec_params(seed=3)
    dec = decoder_view(p, "dec.t")
    hx = np.random.default_rng(5).normal(size=(1, R))
    y = [6, 4]
    h = np.tanh(hx @ dec["W_init"] + dec["b_init"])
    nll = []
    for prev, lab in zip([1] + y, y + [EOS]):
        h = cond_gru_step(dec["emb"][[prev]], h, hx, dec)
        logits = (h @ dec["W_out"] + dec["b_out"])[0]
        nll.append(-(logits[lab] - math.log(sum(math.exp(v) for v in logits))))
    want = sum(nll) / 3
    assert teacher_forced_loss(hx, target([y]), p, "dec.t") == pytest.approx(want, abs=1e-12)


def test_empty_target_rejected():
    with pytest.raises(InputError):
        teacher_forced_loss(np.zeros((1, R)), SentenceBatch(np.zeros((1, 2), dtype=np.int64), np.array([0])),
                            dec_params(), "dec.t")


def test_fresh_loss_sanity_bound():
    rng = Rng(9)
    p = init_decoder(rng, 40, 8, 16, 12, "d")
    hx = rng.uniform(-1, 1, (5, 12))
    seqs = [[int(t) for t in rng.integers(4, 40, int(rng.integers(1, 9)))] for _ in range(5)]
    assert teacher_forced_loss(hx, target(seqs), p, "d") <= math.log(40) + 1


def test_decoder_gradient_check_including_h_x():
    p = dec_params()
    p["hx"] = np.random.default_rng(2).normal(size=(2, R))
    tgt = target([[4, 5, 6], [7]])
    loss, g, dhx = decoder_loss(p, "dec.t", p["hx"], tgt)
    fd = finite_diff_grad(lambda q: decoder_loss(q, "dec.t", q["hx"], tgt, with_grad=False), p)
    for k, v in g.items():
        assert relative_error(v, fd[k]) < 1e-4, k
    assert relative_error(dhx, fd["hx"]) < 1e-4
    assert set(g) | {"hx"} == set(p)


def test_greedy_decode_forced_tokens():
    p = dec_params()
    hx = np.random.default_rng(0).normal(size=(2, R))
    p["dec.t.b_out"] = np.zeros(V)
    p["dec.t.b_out"][5] = 1e6
    assert greedy_decode(hx, p, "dec.t", 4) == [[5, 5, 5, 5], [5, 5, 5, 5]]
    p["dec.t.b_out"][:] = 0
    p["dec.t.b_out"][EOS] = 1e6
    assert greedy_decode(hx, p, "dec.t", 4) == [[], []]


def test_greedy_decode_never_emits_pad_or_bos_and_breaks_ties_low():
    p = {k: np.zeros_like(v) for k, v in dec_params().items()}
    p["dec.t.b_out"][0] = 1e6
    p["dec.t.b_out"][1] = 1e6
    # all remaining logits tie at 0: lowest admissible id is EOS=2
    assert greedy_decode(np.zeros((1, R)), p, "dec.t", 3) == [[]]
    p["dec.t.b_out"][2] = -1.0
    assert greedy_decode(np.zeros((1, R)), p, "dec.t", 3) == [[3, 3, 3]]
