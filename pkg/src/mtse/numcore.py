"""Dense float64 arithmetic, losses, Adam, the seeded RNG and gradient checks.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. A parameter
set is a ``dict`` mapping a dotted name to its array; gradient sets use the
same keys.
"""
import math

import numpy as np

from .errors import DegenerateError, DimensionError, NumericError
from .kernels import adam_update

DTYPE = np.float64


# ---------------------------------------------------------------------------
# RNG

class Rng:
    """Seeded random stream.

    Wraps numpy's PCG64 bit generator. Every stochastic decision in a run
    (initialisation, shuffling, task sampling, dropout) draws from one
    instance in program order, so a seed fixes the whole run.
    """

    def __init__(self, seed=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def random(self, size=None):
        return self.gen.random(size)

    def uniform(self, low, high, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, seq):
        return seq[int(self.gen.integers(len(seq)))]

    def spawn_seed(self):
        """Draw a 63-bit seed for a derived, independent stream."""
        return int(self.gen.integers(0, 2**63 - 1))

    # state <-> list of 32-bit words; every word is exactly representable
    # as a float64, which is what the checkpoint format stores
    def get_state_words(self):
        st = self.gen.bit_generator.state
        words = []
        for big in (st["state"]["state"], st["state"]["inc"]):
            words.extend((big >> (32 * k)) & 0xFFFFFFFF for k in range(4))
        words.append(int(st["has_uint32"]))
        words.append(int(st["uinteger"]))
        return words

    def set_state_words(self, words):
        words = [int(w) for w in words]
        state = sum(words[k] << (32 * k) for k in range(4))
        inc = sum(words[4 + k] << (32 * k) for k in range(4))
        self.gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": state, "inc": inc},
            "has_uint32": words[8],
            "uinteger": words[9],
        }


# ---------------------------------------------------------------------------
# elementwise and affine

def sigmoid(a):
    return 0.5 * (np.tanh(0.5 * a) + 1.0)


def affine(x, W, b):
    """``x @ W + b`` for ``x`` of shape (n, a), ``W`` (a, b), ``b`` (b,)."""
    x = np.asarray(x, dtype=DTYPE)
    W = np.asarray(W, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1 or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"affine: cannot combine x{x.shape} with W{W.shape} and b{b.shape}")
    return x @ W + b


def softmax(logits):
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets, mask=None, return_grad=False):
    """Mean negative log-likelihood over the rows where ``mask`` is 1.

    With ``return_grad`` the gradient with respect to ``logits`` is returned
    as well.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    mask = np.ones(n) if mask is None else np.asarray(mask, dtype=DTYPE)
    count = mask.sum()
    if count <= 0:
        raise DegenerateError("cross_entropy: mask selects no positions")
    lp = log_softmax(logits)
    rows = np.arange(n)
    loss = -(lp[rows, targets] * mask).sum() / count
    if not return_grad:
        return float(loss)
    g = np.exp(lp)
    g[rows, targets] -= 1.0
    g *= (mask / count)[:, None]
    return float(loss), g


# ---------------------------------------------------------------------------
# gradients

def grad(loss_fn, params, batch=None):
    """Gradient of a differentiable loss with respect to every parameter.

    ``loss_fn(params, batch)`` must return ``(loss, grads)`` where ``grads``
    holds the analytic gradient of the tensors it touches; tensors it does
    not mention get an all-zero gradient.
    """
    loss, partial = loss_fn(params, batch)
    name = getattr(loss_fn, "__name__", type(loss_fn).__name__)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss!r}", op=name)
    out = {}
    for key, value in params.items():
        g = partial.get(key)
        if g is None:
            out[key] = np.zeros_like(value)
        else:
            if g.shape != value.shape:
                raise DimensionError(f"{name}: gradient for {key} has shape {g.shape}, expected {value.shape}")
            out[key] = g
    return out


def finite_diff_grad(loss_fn, params, eps=1e-5, names=None):
    """Central-difference gradient of ``loss_fn(params) -> float``.

    ``params`` is perturbed in place one coordinate at a time and restored.
    """
    out = {}
    for key in names if names is not None else params:
        p = params[key]
        flat = p.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn(params)
            flat[i] = orig - eps
            down = loss_fn(params)
            flat[i] = orig
            g[i] = (up - down) / (2.0 * eps)
        out[key] = g.reshape(p.shape)
    return out


def relative_error(analytic, numeric):
    """max over coordinates of |a - f| / max(1, |a|, |f|)."""
    a = np.asarray(analytic, dtype=DTYPE)
    f = np.asarray(numeric, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - f) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(f)))))


def global_norm(grads):
    return math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values()))


def clip_by_global_norm(grads, max_norm):
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# Adam

class AdamState:
    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(params, grads, state, lr=0.002, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: gradient {key} has shape {g.shape}, parameter {p.shape}")
        adam_update(p, g, state.m[key], state.v[key], lr, beta1, beta2, eps, c1, c2)
    return params, state
