"""Task-specific conditional GRU decoder.

Every gate receives an extra additive term from the sentence vector
``h_x`` through the ``C_*`` matrices, and the initial state is a learned
tanh projection of ``h_x``.
"""
import numpy as np

from . import kernels
from .corpus import BOS, EOS, PAD
from .encoder import GATES, pack_cell
from .errors import InputError
from .numcore import cross_entropy, sigmoid

COND_KEYS = tuple(f"C_{g}" for g in GATES)


def init_decoder(rng, vocab_size, emb_dim, hidden, rep_dim, prefix):
    def unif(fan_in, shape):
        a = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-a, a, shape)

    p = {f"{prefix}.emb": unif(emb_dim, (vocab_size, emb_dim))}
    for g in GATES:
        p[f"{prefix}.W_{g}"] = unif(emb_dim, (emb_dim, hidden))
    for g in GATES:
        p[f"{prefix}.U_{g}"] = unif(hidden, (hidden, hidden))
    for g in GATES:
        p[f"{prefix}.C_{g}"] = unif(rep_dim, (rep_dim, hidden))
    for g in GATES:
        p[f"{prefix}.b_{g}"] = np.zeros(hidden)
    p[f"{prefix}.W_init"] = unif(rep_dim, (rep_dim, hidden))
    p[f"{prefix}.b_init"] = np.zeros(hidden)
    p[f"{prefix}.W_out"] = unif(hidden, (hidden, vocab_size))
    p[f"{prefix}.b_out"] = np.zeros(vocab_size)
    return p


def decoder_view(params, prefix):
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def cond_gru_step(x_t, h_prev, h_x, dec):
    r = sigmoid(x_t @ dec["W_r"] + h_prev @ dec["U_r"] + h_x @ dec["C_r"] + dec["b_r"])
    z = sigmoid(x_t @ dec["W_z"] + h_prev @ dec["U_z"] + h_x @ dec["C_z"] + dec["b_z"])
    cand = np.tanh(x_t @ dec["W_d"] + (r * h_prev) @ dec["U_d"] + h_x @ dec["C_d"] + dec["b_d"])
    return (1.0 - z) * h_prev + z * cand


def decoder_init(h_x, dec):
    return np.tanh(h_x @ dec["W_init"] + dec["b_init"])


def teacher_inputs(target):
    """Shift a raw target batch into decoder inputs, labels and lengths.

    Inputs are ``<s> y_1 .. y_m`` and labels ``y_1 .. y_m </s>``.
    """
    if (target.lengths < 1).any():
        raise InputError("decoder target with length 0")
    n, T = target.ids.shape
    lengths = target.lengths + 1
    inputs = np.full((n, T + 1), PAD, dtype=np.int64)
    labels = np.full((n, T + 1), PAD, dtype=np.int64)
    inputs[:, 0] = BOS
    inputs[:, 1:] = target.ids
    labels[:, :T] = target.ids
    labels[np.arange(n), target.lengths] = EOS
    return inputs, labels, lengths


def decoder_loss(params, prefix, h_x, target, with_grad=True):
    """Mean per-token teacher-forced cross-entropy.

    Returns ``loss`` or ``(loss, grads, dh_x)`` with ``with_grad``.
    """
    dec = decoder_view(params, prefix)
    inputs, labels, lengths = teacher_inputs(target)
    n, T = inputs.shape
    W, U, b = pack_cell(dec)
    Cm = np.concatenate([dec["C_r"], dec["C_z"], dec["C_d"]], axis=1)
    X = dec["emb"][inputs]
    a0 = h_x @ dec["W_init"] + dec["b_init"]
    h0 = np.tanh(a0)
    cond = h_x @ Cm
    G = X @ W + b + cond[:, None, :]
    Hs, R, Z, C, P, _ = kernels.gru_forward(G, U, h0, lengths, False)
    Hd = Hs.shape[2]
    V = dec["W_out"].shape[1]
    flat_H = Hs.reshape(-1, Hd)
    logits = flat_H @ dec["W_out"] + dec["b_out"]
    mask = (np.arange(T)[None, :] < lengths[:, None]).reshape(-1).astype(np.float64)
    if not with_grad:
        return cross_entropy(logits, labels.reshape(-1), mask)
    loss, dlogits = cross_entropy(logits, labels.reshape(-1), mask, return_grad=True)

    g = {}
    g["W_out"] = flat_H.T @ dlogits
    g["b_out"] = dlogits.sum(axis=0)
    dHs = (dlogits @ dec["W_out"].T).reshape(n, T, Hd)
    dG, dU, dh0 = kernels.gru_backward(dHs, np.zeros((n, Hd)), U, R, Z, C, P, lengths, False)
    flat_dG = dG.reshape(-1, 3 * Hd)
    dW = X.reshape(-1, X.shape[2]).T @ flat_dG
    db = flat_dG.sum(axis=0)
    dcond = dG.sum(axis=1)
    dC = h_x.T @ dcond
    da0 = dh0 * (1.0 - h0 * h0)
    g["W_init"] = h_x.T @ da0
    g["b_init"] = da0.sum(axis=0)
    dh_x = dcond @ Cm.T + da0 @ dec["W_init"].T
    for j, gate in enumerate(GATES):
        sl = slice(j * Hd, (j + 1) * Hd)
        g[f"W_{gate}"] = dW[:, sl]
        g[f"U_{gate}"] = dU[:, sl]
        g[f"C_{gate}"] = dC[:, sl]
        g[f"b_{gate}"] = db[sl]
    demb = np.zeros_like(dec["emb"])
    kernels.scatter_add_rows(demb, inputs.reshape(-1), (dG @ W.T).reshape(-1, X.shape[2]))
    g["emb"] = demb
    grads = {f"{prefix}.{k}": v for k, v in g.items()}
    return loss, grads, dh_x


def teacher_forced_loss(h_x, target, params, prefix):
    return decoder_loss(params, prefix, h_x, target, with_grad=False)


def greedy_decode(h_x, params, prefix, max_len):
    """Greedy argmax generation for every row of ``h_x``.

    ``<pad>`` and ``<s>`` are never emitted; generation for a row stops at
    ``</s>`` (not included in the output) or after ``max_len`` tokens.
    """
    if max_len < 1:
        raise InputError("max_len must be >= 1")
    dec = decoder_view(params, prefix)
    h_x = np.atleast_2d(h_x)
    n = h_x.shape[0]
    h = decoder_init(h_x, dec)
    prev = np.full(n, BOS, dtype=np.int64)
    out = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    for _ in range(max_len):
        h = cond_gru_step(dec["emb"][prev], h, h_x, dec)
        logits = h @ dec["W_out"] + dec["b_out"]
        logits[:, PAD] = -np.inf
        logits[:, BOS] = -np.inf
        tok = np.argmax(logits, axis=1)
        for i in range(n):
            if done[i]:
                continue
            if tok[i] == EOS:
                done[i] = True
            else:
                out[i].append(int(tok[i]))
        if done.all():
            break
        prev = tok
    return out
