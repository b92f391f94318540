"""Recurrent inner loops shared by the encoder and the conditional decoder.

Both recurrences reduce to the same kernel once the input-side gate
pre-activations are precomputed outside the loop::

    G[:, t] = x_t @ W + b (+ h_x @ C for the conditional decoder)

Gates are packed in the order ``[reset | update | candidate]`` along the
last axis, so ``G`` is ``n x T x 3H`` and the recurrent matrix ``U`` is
``H x 3H``. Rows shorter than ``T`` are right padded; a row only updates
its state while ``t < lengths[i]``, so padded steps neither move the state
nor emit output (their output rows are exactly zero).

The module also holds two smaller hot loops of the training step: the
fused Adam update and the row scatter-add behind embedding gradients.

Two implementations are kept side by side. The numba one uses explicit
loops with sums in index order; the numpy one is vectorised over the
batch. ``gru_forward``/``gru_backward`` point at whichever backend
:mod:`mtse._jit` selected.
"""
import numpy as np

from ._jit import USE_JIT, njit


def _sigmoid(a):
    return 0.5 * (np.tanh(0.5 * a) + 1.0)


# ---------------------------------------------------------------------------
# numpy backend

def gru_forward_numpy(G, U, h0, lengths, reverse):
    n, T, H3 = G.shape
    H = H3 // 3
    Hs = np.zeros((n, T, H))
    R = np.zeros((n, T, H))
    Z = np.zeros((n, T, H))
    C = np.zeros((n, T, H))
    P = np.zeros((n, T, H))
    h = h0.copy()
    Ur, Uz, Ud = U[:, :H], U[:, H:2 * H], U[:, 2 * H:]
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        live = lengths > t
        if not live.any():
            continue
        g = G[:, t]
        r = _sigmoid(g[:, :H] + h @ Ur)
        z = _sigmoid(g[:, H:2 * H] + h @ Uz)
        c = np.tanh(g[:, 2 * H:] + (r * h) @ Ud)
        hn = (1.0 - z) * h + z * c
        m = live[:, None]
        P[:, t] = np.where(m, h, 0.0)
        R[:, t] = np.where(m, r, 0.0)
        Z[:, t] = np.where(m, z, 0.0)
        C[:, t] = np.where(m, c, 0.0)
        h = np.where(m, hn, h)
        Hs[:, t] = np.where(m, h, 0.0)
    return Hs, R, Z, C, P, h


def gru_backward_numpy(dHs, dh_final, U, R, Z, C, P, lengths, reverse):
    n, T, H = dHs.shape
    Ur, Uz, Ud = U[:, :H], U[:, H:2 * H], U[:, 2 * H:]
    dG = np.zeros((n, T, 3 * H))
    dU = np.zeros((H, 3 * H))
    dh = dh_final.copy()
    steps = range(T) if reverse else range(T - 1, -1, -1)
    for t in steps:
        live = lengths > t
        if not live.any():
            continue
        m = live[:, None]
        r, z, c, hp = R[:, t], Z[:, t], C[:, t], P[:, t]
        d = np.where(m, dh + dHs[:, t], 0.0)
        dc = d * z
        dz = d * (c - hp)
        dhp = d * (1.0 - z)
        dad = dc * (1.0 - c * c)
        rh = r * hp
        drh = dad @ Ud.T
        dr = drh * hp
        dhp += drh * r
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        dhp += dar @ Ur.T + daz @ Uz.T
        dU[:, :H] += hp.T @ dar
        dU[:, H:2 * H] += hp.T @ daz
        dU[:, 2 * H:] += rh.T @ dad
        dG[:, t, :H] = dar
        dG[:, t, H:2 * H] = daz
        dG[:, t, 2 * H:] = dad
        dh = np.where(m, dhp, dh)
    return dG, dU, dh


def adam_update_numpy(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    if lr != 0.0:
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def scatter_add_rows_numpy(out, idx, rows):
    np.add.at(out, idx, rows)


# ---------------------------------------------------------------------------
# numba backend

@njit
def gru_forward_numba(G, U, h0, lengths, reverse):
    n, T, H3 = G.shape
    H = H3 // 3
    Hs = np.zeros((n, T, H))
    R = np.zeros((n, T, H))
    Z = np.zeros((n, T, H))
    C = np.zeros((n, T, H))
    P = np.zeros((n, T, H))
    h = h0.copy()
    a = np.empty(3 * H)
    rh = np.empty(H)
    for i in range(n):
        L = lengths[i]
        for s in range(L):
            t = L - 1 - s if reverse else s
            # a = G[i, t] + [h @ Ur | h @ Uz | 0], accumulated row by row of U
            for j in range(3 * H):
                a[j] = G[i, t, j]
            for k in range(H):
                hk = h[i, k]
                P[i, t, k] = hk
                for j in range(2 * H):
                    a[j] += hk * U[k, j]
            for j in range(H):
                R[i, t, j] = 0.5 * (np.tanh(0.5 * a[j]) + 1.0)
                Z[i, t, j] = 0.5 * (np.tanh(0.5 * a[H + j]) + 1.0)
                rh[j] = R[i, t, j] * h[i, j]
            for k in range(H):
                rk = rh[k]
                for j in range(H):
                    a[2 * H + j] += rk * U[k, 2 * H + j]
            for j in range(H):
                c = np.tanh(a[2 * H + j])
                z = Z[i, t, j]
                C[i, t, j] = c
                h[i, j] = (1.0 - z) * h[i, j] + z * c
                Hs[i, t, j] = h[i, j]
    return Hs, R, Z, C, P, h


@njit
def gru_backward_numba(dHs, dh_final, U, R, Z, C, P, lengths, reverse):
    n, T, H = dHs.shape
    UT = np.ascontiguousarray(U.T)
    dG = np.zeros((n, T, 3 * H))
    dU = np.zeros((H, 3 * H))
    dh = dh_final.copy()
    d = np.empty(H)
    dhp = np.empty(H)
    drh = np.empty(H)
    da = np.empty(3 * H)
    for i in range(n):
        L = lengths[i]
        for s in range(L):
            # undo the forward visiting order
            t = s if reverse else L - 1 - s
            for j in range(H):
                d[j] = dh[i, j] + dHs[i, t, j]
                z = Z[i, t, j]
                c = C[i, t, j]
                da[2 * H + j] = d[j] * z * (1.0 - c * c)
                da[H + j] = d[j] * (c - P[i, t, j]) * z * (1.0 - z)
                dhp[j] = d[j] * (1.0 - z)
                drh[j] = 0.0
            for j in range(H):
                g = da[2 * H + j]
                for k in range(H):
                    drh[k] += g * UT[2 * H + j, k]
            for k in range(H):
                r = R[i, t, k]
                da[k] = drh[k] * P[i, t, k] * r * (1.0 - r)
                dhp[k] += drh[k] * r
            for j in range(2 * H):
                g = da[j]
                for k in range(H):
                    dhp[k] += g * UT[j, k]
            for k in range(H):
                hk = P[i, t, k]
                rhk = R[i, t, k] * hk
                for j in range(2 * H):
                    dU[k, j] += hk * da[j]
                for j in range(H):
                    dU[k, 2 * H + j] += rhk * da[2 * H + j]
            for j in range(3 * H):
                dG[i, t, j] = da[j]
            for j in range(H):
                dh[i, j] = dhp[j]
    return dG, dU, dh


@njit
def adam_update_numba(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    # flat, in place; same operation order as the numpy version
    for i in range(p.size):
        gi = g[i]
        mi = m[i] * beta1 + (1.0 - beta1) * gi
        vi = v[i] * beta2 + (1.0 - beta2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        if lr != 0.0:
            p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


@njit
def scatter_add_rows_numba(out, idx, rows):
    for r in range(idx.size):
        k = idx[r]
        for j in range(rows.shape[1]):
            out[k, j] += rows[r, j]


if USE_JIT:
    gru_forward = gru_forward_numba
    gru_backward = gru_backward_numba
    _adam_flat = adam_update_numba
    scatter_add_rows = scatter_add_rows_numba
else:
    gru_forward = gru_forward_numpy
    gru_backward = gru_backward_numpy
    _adam_flat = adam_update_numpy
    scatter_add_rows = scatter_add_rows_numpy


def adam_update(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    """In-place Adam update of one tensor with its moment buffers."""
    _adam_flat(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1), v.reshape(-1),
               float(lr), float(beta1), float(beta2), float(eps), float(c1), float(c2))
