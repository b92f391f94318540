"""Pair classification head: ``[u; v; |u-v|; u*v]`` into a tanh MLP."""
import numpy as np

from .encoder import SentenceBatch, encoder_backward, encoder_forward
from .errors import DimensionError
from .numcore import cross_entropy


def pair_features(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"pair_features: u{u.shape} and v{v.shape} differ")
    return np.concatenate([u, v, np.abs(u - v), u * v], axis=-1)


def pair_features_backward(u, v, dfeat):
    """Gradients of the feature map with respect to ``u`` and ``v``."""
    d = u.shape[-1]
    du_, dv_, dabs, dprod = (dfeat[..., k * d:(k + 1) * d] for k in range(4))
    s = np.sign(u - v)
    du = du_ + dabs * s + dprod * v
    dv = dv_ - dabs * s + dprod * u
    return du, dv


def init_mlp(rng, sizes, prefix):
    """Layers ``sizes[0] -> sizes[1] -> ... -> sizes[-1]``; uniform(+-1/sqrt(fan_in))."""
    p = {}
    for i in range(len(sizes) - 1):
        a = 1.0 / np.sqrt(sizes[i])
        p[f"{prefix}.l{i}.W"] = rng.uniform(-a, a, (sizes[i], sizes[i + 1]))
        p[f"{prefix}.l{i}.b"] = np.zeros(sizes[i + 1])
    return p


def mlp_layers(params, prefix):
    n = 0
    while f"{prefix}.l{n}.W" in params:
        n += 1
    return n


def dropout_masks(rng, shapes, rates):
    """Inverted-dropout masks (kept units scaled by 1/(1-rate)); ``None`` where rate is 0."""
    masks = []
    for shape, rate in zip(shapes, rates):
        if rate <= 0.0:
            masks.append(None)
        else:
            keep = rng.random(shape) >= rate
            masks.append(keep / (1.0 - rate))
    return masks


def mlp_input_shapes(params, prefix, n):
    return [(n, params[f"{prefix}.l{i}.W"].shape[0]) for i in range(mlp_layers(params, prefix))]


def mlp_forward(features, params, prefix, rates=None, train_mode=False, rng=None, masks=None):
    """Return ``(logits, cache)``.

    ``rates[i]`` is the dropout rate applied to the input of layer ``i``;
    hidden layers use tanh. Dropout is active only in ``train_mode`` and
    its masks come from ``masks`` if given, otherwise from ``rng``.
    """
    nl = mlp_layers(params, prefix)
    rates = [0.0] * nl if rates is None else list(rates) + [0.0] * (nl - len(rates))
    if train_mode and masks is None and any(r > 0 for r in rates):
        masks = dropout_masks(rng, mlp_input_shapes(params, prefix, features.shape[0]), rates)
    if not train_mode or masks is None:
        masks = [None] * nl
    h = features
    raw, acts = [], []
    for i in range(nl):
        raw.append(h)
        inp = h if masks[i] is None else h * masks[i]
        acts.append(inp)
        a = inp @ params[f"{prefix}.l{i}.W"] + params[f"{prefix}.l{i}.b"]
        h = np.tanh(a) if i < nl - 1 else a
    return h, (raw, acts, masks)


def mlp_backward(params, prefix, cache, dlogits):
    raw, acts, masks = cache
    grads = {}
    d = dlogits
    for i in range(len(acts) - 1, -1, -1):
        grads[f"{prefix}.l{i}.W"] = acts[i].T @ d
        grads[f"{prefix}.l{i}.b"] = d.sum(axis=0)
        d = d @ params[f"{prefix}.l{i}.W"].T
        if masks[i] is not None:
            d = d * masks[i]
        if i > 0:
            d = d * (1.0 - raw[i] * raw[i])
    return grads, d


def nli_loss(params, premise, hypothesis, labels, rates=None, train_mode=False, rng=None,
             masks=None, enc_prefix="enc", head_prefix="nli", with_grad=True):
    """Shared-encoder NLI loss over a minibatch of premise/hypothesis pairs.

    Both sides are encoded in one padded batch (padding does not change
    the encodings), so the encoder runs once.
    """
    n = premise.size
    width = max(premise.ids.shape[1], hypothesis.ids.shape[1])
    ids = np.zeros((2 * n, width), dtype=np.int64)
    ids[:n, : premise.ids.shape[1]] = premise.ids
    ids[n:, : hypothesis.ids.shape[1]] = hypothesis.ids
    both = SentenceBatch(ids, np.concatenate([premise.lengths, hypothesis.lengths]))
    out, ecache = encoder_forward(params, both, enc_prefix)
    hx = out["h_x"]
    u, v = hx[:n], hx[n:]
    feats = pair_features(u, v)
    logits, mcache = mlp_forward(feats, params, head_prefix, rates, train_mode, rng, masks)
    if not with_grad:
        return cross_entropy(logits, labels)
    loss, dlogits = cross_entropy(logits, labels, return_grad=True)
    grads, dfeat = mlp_backward(params, head_prefix, mcache, dlogits)
    du, dv = pair_features_backward(u, v, dfeat)
    grads.update(encoder_backward(params, ecache, np.concatenate([du, dv], axis=0)))
    return loss, grads


def nli_predict(params, premise, hypothesis, enc_prefix="enc", head_prefix="nli"):
    out_p, _ = encoder_forward(params, premise, enc_prefix)
    out_h, _ = encoder_forward(params, hypothesis, enc_prefix)
    logits, _ = mlp_forward(pair_features(out_p["h_x"], out_h["h_x"]), params, head_prefix)
    return np.argmax(logits, axis=1)
