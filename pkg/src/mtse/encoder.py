"""Shared bidirectional GRU sentence encoder."""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError, InputError
from .numcore import sigmoid

GATES = ("r", "z", "d")
CELL_KEYS = tuple(f"W_{g}" for g in GATES) + tuple(f"U_{g}" for g in GATES) + tuple(f"b_{g}" for g in GATES)
POOLING = ("last", "max")


@dataclass
class SentenceBatch:
    """Right-padded token ids (``n x T``) with per-row lengths."""

    ids: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_sequences(cls, seqs, pad_id=0, min_width=None):
        if not seqs:
            raise InputError("empty batch")
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        if (lengths == 0).any():
            raise InputError(f"empty sentence at batch row {int(np.argmin(lengths))}")
        T = int(lengths.max())
        if min_width is not None:
            T = max(T, min_width)
        ids = np.full((len(seqs), T), pad_id, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
        return cls(ids, lengths)

    @property
    def size(self):
        return self.ids.shape[0]

    def validate(self, vocab_size, pad_id=0):
        if self.ids.ndim != 2 or self.lengths.shape != (self.ids.shape[0],):
            raise DimensionError(f"batch ids {self.ids.shape} and lengths {self.lengths.shape} disagree")
        if (self.lengths < 1).any():
            raise InputError("empty sentence in batch")
        if (self.lengths > self.ids.shape[1]).any():
            raise InputError("length exceeds batch width")
        if self.ids.min() < 0 or self.ids.max() >= vocab_size:
            raise InputError(f"token id outside vocabulary of size {vocab_size}")
        live = np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]
        if (self.ids[~live] != pad_id).any():
            raise InputError("non-pad id after sentence end")
        if (self.ids[live] == pad_id).any():
            raise InputError("pad id inside sentence span")


# ---------------------------------------------------------------------------
# parameters

def init_cell(rng, in_dim, hidden, prefix):
    """Uniform(+-1/sqrt(fan_in)) matrices, zero biases."""
    out = {}
    for g in GATES:
        a = 1.0 / np.sqrt(in_dim)
        out[f"{prefix}.W_{g}"] = rng.uniform(-a, a, (in_dim, hidden))
    for g in GATES:
        a = 1.0 / np.sqrt(hidden)
        out[f"{prefix}.U_{g}"] = rng.uniform(-a, a, (hidden, hidden))
    for g in GATES:
        out[f"{prefix}.b_{g}"] = np.zeros(hidden)
    return out


def init_encoder(rng, vocab_size, emb_dim, hidden, layers=1, prefix="enc"):
    a = 1.0 / np.sqrt(emb_dim)
    params = {f"{prefix}.emb": rng.uniform(-a, a, (vocab_size, emb_dim))}
    in_dim = emb_dim
    for layer in range(layers):
        for side in ("fwd", "bwd"):
            params.update(init_cell(rng, in_dim, hidden, f"{prefix}.l{layer}.{side}"))
        in_dim = 2 * hidden
    return params


def cell_view(params, prefix):
    return {k: params[f"{prefix}.{k}"] for k in CELL_KEYS}


def pack_cell(cell):
    W = np.concatenate([cell["W_r"], cell["W_z"], cell["W_d"]], axis=1)
    U = np.concatenate([cell["U_r"], cell["U_z"], cell["U_d"]], axis=1)
    b = np.concatenate([cell["b_r"], cell["b_z"], cell["b_d"]])
    return W, U, b


def unpack_into(grads, prefix, dW, dU, db):
    H = dU.shape[0]
    for j, g in enumerate(GATES):
        sl = slice(j * H, (j + 1) * H)
        grads[f"{prefix}.W_{g}"] = dW[:, sl]
        grads[f"{prefix}.U_{g}"] = dU[:, sl]
        grads[f"{prefix}.b_{g}"] = db[sl]


def encoder_layers(params, prefix="enc"):
    n = 0
    while f"{prefix}.l{n}.fwd.W_r" in params:
        n += 1
    return n


# ---------------------------------------------------------------------------
# operations

def gru_cell_step(x_t, h_prev, cell):
    """One plain GRU step: reset, update, candidate, interpolation."""
    r = sigmoid(x_t @ cell["W_r"] + h_prev @ cell["U_r"] + cell["b_r"])
    z = sigmoid(x_t @ cell["W_z"] + h_prev @ cell["U_z"] + cell["b_z"])
    cand = np.tanh(x_t @ cell["W_d"] + (r * h_prev) @ cell["U_d"] + cell["b_d"])
    return (1.0 - z) * h_prev + z * cand


def _run_direction(X, cell, lengths, reverse, h0=None):
    W, U, b = pack_cell(cell)
    n, T, _ = X.shape
    H = U.shape[0]
    if X.shape[2] != W.shape[0]:
        raise DimensionError(f"encoder input width {X.shape[2]} does not match W {W.shape}")
    G = X @ W + b
    h0 = np.zeros((n, H)) if h0 is None else h0
    Hs, R, Z, C, P, hT = kernels.gru_forward(G, U, h0, lengths, reverse)
    return Hs, hT, (X, W, U, R, Z, C, P)


def encoder_forward(params, batch, prefix="enc"):
    """Run the stacked bidirectional encoder; returns ``(out, cache)``.

    ``out`` holds ``H_fwd``, ``H_bwd`` (top layer, ``n x T x H``) and
    ``h_x = [H_fwd[i, len-1] ; H_bwd[i, 0]]``.
    """
    lengths = batch.lengths
    if (lengths < 1).any():
        raise InputError("cannot encode an empty sentence")
    layers = encoder_layers(params, prefix)
    X = params[f"{prefix}.emb"][batch.ids]
    caches = []
    for layer in range(layers):
        Hf, hf, cf = _run_direction(X, cell_view(params, f"{prefix}.l{layer}.fwd"), lengths, False)
        Hb, hb, cb = _run_direction(X, cell_view(params, f"{prefix}.l{layer}.bwd"), lengths, True)
        caches.append((cf, cb))
        X = np.concatenate([Hf, Hb], axis=2)
    h_x = np.concatenate([hf, hb], axis=1)
    out = {"H_fwd": Hf, "H_bwd": Hb, "h_x": h_x}
    return out, (batch, layers, caches, prefix)


def encoder_backward(params, cache, dh_x):
    """Gradients of every encoder tensor given ``dL/dh_x``."""
    batch, layers, caches, prefix = cache
    lengths = batch.lengths
    H = dh_x.shape[1] // 2
    grads = {}
    n, T = batch.ids.shape
    dHf = np.zeros((n, T, H))
    dHb = np.zeros((n, T, H))
    dhf, dhb = dh_x[:, :H], dh_x[:, H:]
    for layer in range(layers - 1, -1, -1):
        cf, cb = caches[layer]
        dX = None
        for side, c, dHs, dhT, reverse in (("fwd", cf, dHf, dhf, False), ("bwd", cb, dHb, dhb, True)):
            X, W, U, R, Z, C, P = c
            dG, dU, _ = kernels.gru_backward(dHs, dhT, U, R, Z, C, P, lengths, reverse)
            flat_dG = dG.reshape(-1, dG.shape[2])
            dW = X.reshape(-1, X.shape[2]).T @ flat_dG
            db = flat_dG.sum(axis=0)
            unpack_into(grads, f"{prefix}.l{layer}.{side}", dW, dU, db)
            part = dG @ W.T
            dX = part if dX is None else dX + part
        if layer > 0:
            Hp = dX.shape[2] // 2
            dHf, dHb = dX[:, :, :Hp], dX[:, :, Hp:]
            dhf = np.zeros((n, Hp))
            dhb = np.zeros((n, Hp))
    demb = np.zeros_like(params[f"{prefix}.emb"])
    kernels.scatter_add_rows(demb, batch.ids.reshape(-1), dX.reshape(-1, dX.shape[2]))
    grads[f"{prefix}.emb"] = demb
    return grads


def encode_batch(batch, params, prefix="enc"):
    """Return ``(H_fwd, H_bwd, h_x)`` for a padded batch."""
    out, _ = encoder_forward(params, batch, prefix)
    return out["H_fwd"], out["H_bwd"], out["h_x"]


def pool(H, lengths, strategy):
    """Reduce concatenated ``[fwd ; bwd]`` states ``n x T x 2H`` to ``n x 2H``."""
    if strategy not in POOLING:
        raise ConfigError(f"unknown pooling strategy {strategy!r}; expected one of {POOLING}")
    lengths = np.asarray(lengths, dtype=np.int64)
    n, T, D = H.shape
    if strategy == "last":
        half = D // 2
        rows = np.arange(n)
        return np.concatenate([H[rows, lengths - 1, :half], H[:, 0, half:]], axis=1)
    live = np.arange(T)[None, :, None] < lengths[:, None, None]
    return np.where(live, H, -np.inf).max(axis=1)
