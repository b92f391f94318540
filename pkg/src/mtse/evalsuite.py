"""Evaluation of frozen sentence representations.

Nothing in this module writes to model parameters; models are only ever
asked to encode.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DegenerateError, DimensionError, InputError
from .nli_head import init_mlp, mlp_backward, mlp_forward, pair_features
from .numcore import AdamState, Rng, adam_step, cross_entropy, softmax

log = logging.getLogger(__name__)

L2_GRID = (2.0**-6, 2.0**-4, 2.0**-2, 1.0, 2.0**2, 2.0**4)
PROBE_KINDS = ("length", "content", "order", "passive", "tense", "tss")


@dataclass
class RepresentationMatrix:
    values: np.ndarray
    pooling: str = "last"
    model_id: str = ""
    rows: list = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"representation matrix must be 2-d, got shape {self.values.shape}")
        if self.rows is None:
            self.rows = list(range(self.values.shape[0]))

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]


def params_digest(params):
    """SHA-256 over every tensor, in key order."""
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return h.hexdigest()


def encode_corpus(model, sentences, pooling="last", batch_size=32, model_id=None):
    values = model.encode(sentences, pooling=pooling, batch_size=batch_size)
    return RepresentationMatrix(values, pooling, model_id or params_digest(model.params)[:12])


def concat_representations(reps):
    if not reps:
        raise InputError("nothing to concatenate")
    n = reps[0].n
    for r in reps[1:]:
        if r.n != n or list(r.rows) != list(reps[0].rows):
            raise InputError("representation matrices are not row-aligned")
    return RepresentationMatrix(np.concatenate([r.values for r in reps], axis=1),
                                "+".join(r.pooling for r in reps),
                                "+".join(r.model_id for r in reps), list(reps[0].rows))


def save_representations(path, rep):
    with open(path, "wb") as fh:
        fh.write(f"MTSE-REP v1 n={rep.n} d={rep.d} pooling={rep.pooling}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rep.values, dtype="<f8").tobytes())


def load_representations(path):
    from .errors import FormatError

    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", "replace").split()
        body = fh.read()
    if len(header) != 5 or header[:2] != ["MTSE-REP", "v1"]:
        raise FormatError(f"{path}: not an MTSE-REP v1 file")
    fields = dict(tok.split("=", 1) for tok in header[2:])
    n, d = int(fields["n"]), int(fields["d"])
    if len(body) != 8 * n * d:
        raise FormatError(f"{path}: expected {8 * n * d} payload bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(n, d)
    return RepresentationMatrix(values, fields["pooling"])


# ---------------------------------------------------------------------------
# logistic regression

def _standardize(train, *others):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return [(a - mu) / sd for a in (train,) + others]


class LogisticRegression:
    """Multinomial logistic regression fitted by full-batch gradient descent.

    Objective: mean cross-entropy + ``l2 / (2 n) * ||W||^2`` (bias not
    penalised). The step size is the inverse of a bound on the Hessian.
    """

    def __init__(self, l2=1.0, max_iter=500, tol=1e-6):
        self.l2 = l2
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y, n_classes=None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        n, d = X.shape
        k = int(n_classes or y.max() + 1)
        lam = self.l2 / n
        W = np.zeros((d, k))
        b = np.zeros(k)
        onehot = np.zeros((n, k))
        onehot[np.arange(n), y] = 1.0
        smax = np.linalg.norm(X, 2) ** 2 if d else 0.0
        step = 1.0 / (0.5 * (smax + n) / n + lam)
        self.n_iter = 0
        for it in range(self.max_iter):
            P = softmax(X @ W + b)
            G = (P - onehot) / n
            gW = X.T @ G + lam * W
            gb = G.sum(axis=0)
            self.n_iter = it + 1
            if np.sqrt((gW * gW).sum() + (gb * gb).sum()) < self.tol:
                break
            W -= step * gW
            b -= step * gb
        self.W, self.b = W, b
        return self

    def predict(self, X):
        return np.argmax(np.asarray(X) @ self.W + self.b, axis=1)

    def score(self, X, y):
        return float(np.mean(self.predict(X) == np.asarray(y)))


class CVResult(NamedTuple):
    best_l2: float
    cv_accuracy: float
    test_accuracy: float
    fold_accuracies: dict


def _check_labels(y):
    y = np.asarray(y, dtype=np.int64)
    if np.unique(y).size < 2:
        raise DegenerateError("classification needs at least two classes")
    return y


def kfold_blocks(n, folds, rng):
    """Contiguous blocks of a seeded permutation."""
    order = rng.permutation(n)
    return np.array_split(order, folds)


def logreg_cv_eval(X, y, folds=10, l2_grid=L2_GRID, seed=0, test_X=None, test_y=None,
                   test_fraction=0.2, max_iter=500):
    """Tune the L2 penalty by k-fold CV, refit on all training rows, score on test.

    Without an explicit test set, ``test_fraction`` of the rows are held out
    (seeded) before cross-validation.
    """
    X = np.asarray(X, dtype=np.float64)
    y = _check_labels(y)
    rng = Rng(seed)
    if test_X is None:
        order = rng.permutation(len(y))
        n_test = int(round(test_fraction * len(y)))
        test_idx, train_idx = order[:n_test], order[n_test:]
        test_X, test_y = X[test_idx], y[test_idx]
        X, y = X[train_idx], y[train_idx]
    test_X = np.asarray(test_X, dtype=np.float64)
    test_y = np.asarray(test_y, dtype=np.int64)
    n = len(y)
    if n < folds:
        raise InputError(f"{n} training rows cannot be split into {folds} folds")
    k = int(max(y.max(), test_y.max() if test_y.size else 0) + 1)
    blocks = kfold_blocks(n, folds, rng)
    per_l2 = {}
    for l2 in l2_grid:
        accs = []
        for f in range(folds):
            val = blocks[f]
            trn = np.concatenate([blocks[g] for g in range(folds) if g != f])
            Xt, Xv = _standardize(X[trn], X[val])
            clf = LogisticRegression(l2, max_iter).fit(Xt, y[trn], k)
            accs.append(clf.score(Xv, y[val]))
        per_l2[l2] = accs
    # ties go to the smaller penalty
    best = max(sorted(l2_grid), key=lambda l2: (np.mean(per_l2[l2]), -l2))
    Xt, Xs = _standardize(X, test_X)
    clf = LogisticRegression(best, max_iter).fit(Xt, y, k)
    test_acc = clf.score(Xs, test_y) if test_y.size else float("nan")
    return CVResult(best, float(np.mean(per_l2[best])), test_acc, per_l2)


# ---------------------------------------------------------------------------
# MLP classifier

@dataclass
class MlpSpec:
    hidden: list = field(default_factory=lambda: [64, 64])
    dropout: float = 0.5
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.002


def train_mlp(X, y, n_classes, spec, rng, X_val=None, y_val=None):
    """Adam-trained tanh MLP; keeps the epoch with the best validation accuracy."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    sizes = [X.shape[1]] + list(spec.hidden) + [n_classes]
    params = init_mlp(rng, sizes, "clf")
    rates = [0.0] + [spec.dropout] * len(spec.hidden)
    state = AdamState(params)
    best = ({k: v.copy() for k, v in params.items()}, -1.0)
    for _ in range(spec.epochs):
        order = rng.permutation(len(y))
        for i in range(0, len(y), spec.batch_size):
            idx = order[i:i + spec.batch_size]
            logits, cache = mlp_forward(X[idx], params, "clf", rates, True, rng)
            _, dlog = cross_entropy(logits, y[idx], return_grad=True)
            grads, _ = mlp_backward(params, "clf", cache, dlog)
            adam_step(params, grads, state, spec.lr)
        if X_val is not None and len(y_val):
            acc = mlp_accuracy(params, X_val, y_val)
            if acc > best[1]:
                best = ({k: v.copy() for k, v in params.items()}, acc)
    if X_val is not None and len(y_val) and best[1] >= 0:
        return best[0]
    return params


def mlp_accuracy(params, X, y):
    logits, _ = mlp_forward(np.asarray(X, dtype=np.float64), params, "clf")
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


def _split3(n, rng, fractions=(0.7, 0.1, 0.2)):
    order = rng.permutation(n)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    return order[:a], order[a:b], order[b:]


def mlp_pair_eval(U, V, labels, spec=None, seed=0, splits=(0.7, 0.1, 0.2)):
    """Pair classification from ``[u; v; |u-v|; u*v]`` with a dropout MLP.

    Seeded disjoint train/validation/test splits; returns test accuracy.
    """
    spec = spec or MlpSpec()
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if U.shape != V.shape:
        raise InputError("paired representation matrices are not aligned")
    y = _check_labels(labels)
    rng = Rng(seed)
    feats = pair_features(U, V)
    tr, va, te = _split3(len(y), rng, splits)
    Xtr, Xva, Xte = _standardize(feats[tr], feats[va], feats[te])
    params = train_mlp(Xtr, y[tr], int(y.max() + 1), spec, rng, Xva, y[va])
    return mlp_accuracy(params, Xte, y[te])


# ---------------------------------------------------------------------------
# pooling selection

def validation_accuracy(X, y, classifier="logreg", seed=0, val_fraction=0.2):
    """Train on a seeded split of ``(X, y)`` and return validation accuracy."""
    if callable(classifier):
        return float(classifier(X, y))
    y = _check_labels(y)
    rng = Rng(seed)
    order = rng.permutation(len(y))
    n_val = max(1, int(round(val_fraction * len(y))))
    va, tr = order[:n_val], order[n_val:]
    Xt, Xv = _standardize(X[tr], X[va])
    k = int(y.max() + 1)
    if classifier == "logreg":
        return LogisticRegression(1.0).fit(Xt, y[tr], k).score(Xv, y[va])
    if classifier == "mlp":
        params = train_mlp(Xt, y[tr], k, MlpSpec(hidden=[64], dropout=0.0), rng)
        return mlp_accuracy(params, Xv, y[va])
    raise InputError(f"unknown classifier {classifier!r}")


def choose_pooling(scores):
    """``max`` only when it is strictly better; ties go to ``last``."""
    return "max" if scores["max"] > scores["last"] else "last"


def pooling_scores(model, sentences, labels, classifier="logreg", seed=0):
    if len(sentences) == 0:
        raise InputError("empty validation set")
    y = np.asarray(labels)
    return {p: validation_accuracy(model.encode(sentences, pooling=p), y, classifier, seed)
            for p in ("last", "max")}


def select_pooling(model, sentences, labels, classifier="logreg", seed=0):
    return choose_pooling(pooling_scores(model, sentences, labels, classifier, seed))


# ---------------------------------------------------------------------------
# probing

@dataclass
class ProbeDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    kind: str
    groups: np.ndarray = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise InputError("probe features and labels are not row-aligned")
        if self.labels.size and (self.labels.max() >= self.n_classes or self.labels.min() < 0):
            raise InputError("probe label outside class range")
        if self.groups is None:
            self.groups = np.arange(len(self.labels))


def length_bins(lengths, n_bins=8):
    """Equal-population bins over the length-sorted corpus (stable order)."""
    lengths = np.asarray(lengths)
    order = np.argsort(lengths, kind="stable")
    labels = np.empty(len(lengths), dtype=np.int64)
    edges = []
    for b, chunk in enumerate(np.array_split(order, n_bins)):
        labels[chunk] = b
        edges.append((int(lengths[chunk].min()), int(lengths[chunk].max())) if len(chunk) else None)
    return labels, edges


def _meta_field(metadata, name):
    if metadata is None:
        raise InputError(f"probe needs metadata field {name!r} but the corpus has no metadata")
    try:
        return [m[name] for m in metadata]
    except (KeyError, TypeError):
        raise InputError(f"corpus metadata is missing field {name!r}") from None


def make_probe_dataset(kind, sentences, reps, metadata=None, word_vec=None, vocab_words=None,
                       seed=0, n_bins=8, n_tss=None):
    """Build a probe dataset over ``sentences`` (token lists) and their representations.

    ``word_vec(token) -> vector`` is required for ``content`` and ``order``;
    content negatives are drawn from ``vocab_words`` (default: every token
    seen in the corpus).
    """
    if kind not in PROBE_KINDS:
        raise InputError(f"unknown probe kind {kind!r}; expected one of {PROBE_KINDS}")
    R = reps.values if isinstance(reps, RepresentationMatrix) else np.asarray(reps, dtype=np.float64)
    if len(R) != len(sentences):
        raise InputError("representations and sentences are not row-aligned")
    rng = Rng(seed)
    if kind == "length":
        labels, edges = length_bins([len(s) for s in sentences], n_bins)
        return ProbeDataset(R, labels, n_bins, kind, info={"bin_edges": edges})
    if kind in ("passive", "tense", "tss"):
        field_name = {"passive": "voice", "tense": "tense", "tss": "tss"}[kind]
        vals = _meta_field(metadata, field_name)
        if kind == "passive":
            labels = [int(v == "passive") for v in vals]
            k = 2
        elif kind == "tense":
            labels = [int(v == "past") for v in vals]
            k = 2
        else:
            labels = [int(v) for v in vals]
            k = n_tss or max(labels) + 1
        return ProbeDataset(R, labels, k, kind)
    if word_vec is None:
        raise InputError(f"{kind} probe needs word representations")
    feats, labels, groups = [], [], []
    if kind == "content":
        words = sorted(vocab_words or {t for s in sentences for t in s})
        for i, s in enumerate(sentences):
            present = set(s)
            absent = [w for w in words if w not in present]
            if not absent:
                continue
            pos = s[int(rng.integers(len(s)))]
            neg = absent[int(rng.integers(len(absent)))]
            for w, lab in ((pos, 1), (neg, 0)):
                feats.append(np.concatenate([R[i], word_vec(w)]))
                labels.append(lab)
                groups.append(i)
    else:
        for i, s in enumerate(sentences):
            counts = {}
            for t in s:
                counts[t] = counts.get(t, 0) + 1
            uniq = [j for j, t in enumerate(s) if counts[t] == 1]
            if len(uniq) < 2:
                continue
            a, b = sorted(uniq[j] for j in rng.permutation(len(uniq))[:2])
            wa, wb = word_vec(s[a]), word_vec(s[b])
            feats.append(np.concatenate([R[i], wa, wb]))
            labels.append(1)
            feats.append(np.concatenate([R[i], wb, wa]))
            labels.append(0)
            groups.append(i)
            groups.append(i)
    if not feats:
        raise InputError(f"no usable sentences for the {kind} probe")
    return ProbeDataset(np.array(feats), labels, 2, kind, np.array(groups))


class ProbeResult(NamedTuple):
    accuracy: float
    baseline: float
    n_train: int
    n_test: int


DEFAULT_PROBE_CLASSIFIER = {"length": "logreg", "passive": "logreg", "tense": "logreg", "tss": "logreg",
                            "content": "mlp", "order": "mlp"}


def run_probe(probe, classifier=None, seed=0, test_fraction=0.2, folds=10, mlp_spec=None):
    """Seeded 80/20 split by group; accuracy and majority baseline in percent.

    Rows sharing a group (the two orientations of an order pair, the
    positive and negative word of a content sentence) land in the same
    split, which keeps balanced probes exactly balanced on the test side.
    """
    classifier = classifier or DEFAULT_PROBE_CLASSIFIER[probe.kind]
    rng = Rng(seed)
    groups = np.unique(probe.groups)
    order = groups[rng.permutation(groups.size)]
    test_groups = set(order[: int(round(test_fraction * groups.size))].tolist())
    is_test = np.array([g in test_groups for g in probe.groups])
    X, y = np.asarray(probe.features, dtype=np.float64), probe.labels
    Xtr, ytr, Xte, yte = X[~is_test], y[~is_test], X[is_test], y[is_test]
    counts = np.bincount(yte, minlength=probe.n_classes)
    baseline = 100.0 * counts.max() / max(1, len(yte))
    if np.unique(ytr).size < 2:
        acc = float(np.mean(yte == ytr[0])) if len(ytr) else 0.0
    elif classifier == "logreg":
        acc = logreg_cv_eval(Xtr, ytr, folds=min(folds, len(ytr)), seed=seed, test_X=Xte, test_y=yte).test_accuracy
    elif classifier == "mlp":
        spec = mlp_spec or MlpSpec(hidden=[64], dropout=0.0, epochs=30)
        Xs, Xt = _standardize(Xtr, Xte)
        n_val = max(1, len(ytr) // 10)
        params = train_mlp(Xs[n_val:], ytr[n_val:], probe.n_classes, spec, rng, Xs[:n_val], ytr[:n_val])
        acc = mlp_accuracy(params, Xt, yte)
    else:
        raise InputError(f"unknown probe classifier {classifier!r}")
    return ProbeResult(100.0 * acc, baseline, int(len(ytr)), int(len(yte)))


# ---------------------------------------------------------------------------
# similarity and retrieval

def cosine_rows(U, V):
    """Row-wise cosine; rows with a zero vector get 0. Returns ``(cos, n_zero)``."""
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    nu = np.linalg.norm(U, axis=1)
    nv = np.linalg.norm(V, axis=1)
    zero = (nu == 0) | (nv == 0)
    denom = np.where(zero, 1.0, nu * nv)
    cos = np.where(zero, 0.0, (U * V).sum(axis=1) / denom)
    return cos, int(zero.sum())


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = a - a.mean()
    db = b - b.mean()
    return float((da * db).sum() / np.sqrt((da * da).sum() * (db * db).sum()))


class StsResult(NamedTuple):
    pearson: float
    n_zero_vectors: int


def cosine_sts(U, V, gold):
    """Pearson correlation between pairwise cosines and gold similarity scores."""
    gold = np.asarray(gold, dtype=np.float64)
    if len(gold) < 3:
        raise InputError("need at least 3 pairs")
    if np.all(gold == gold[0]):
        raise DegenerateError("gold scores have zero variance; correlation undefined")
    cos, n_zero = cosine_rows(U, V)
    if n_zero:
        log.warning("%d pair(s) contain a zero vector; cosine taken as 0", n_zero)
    if np.all(cos == cos[0]):
        raise DegenerateError("cosine scores have zero variance; correlation undefined")
    return StsResult(pearson(cos, gold), n_zero)


def nearest_neighbors(query, matrix, k, query_index=None):
    """Indices of the ``k`` rows most cosine-similar to ``query``.

    Ties go to the lower row index. The query's own row is excluded: pass
    ``query_index`` explicitly, or the first row bit-identical to ``query``
    is dropped.
    """
    q = np.asarray(query, dtype=np.float64)
    M = np.asarray(matrix, dtype=np.float64)
    qn = np.linalg.norm(q)
    if qn == 0:
        raise InputError("query vector is zero; cosine undefined")
    if query_index is None:
        same = np.flatnonzero(np.all(M == q, axis=1))
        query_index = int(same[0]) if same.size else None
    norms = np.linalg.norm(M, axis=1)
    cos = np.where(norms == 0, 0.0, (M @ q) / np.where(norms == 0, 1.0, norms * qn))
    idx = np.arange(M.shape[0])
    if query_index is not None:
        keep = idx != query_index
        cos, idx = cos[keep], idx[keep]
    if k > idx.size:
        raise InputError(f"k={k} exceeds the {idx.size} candidate rows")
    order = np.lexsort((idx, -cos))
    return idx[order[:k]]


def token_accuracy(predictions, references):
    """Position-wise token accuracy of decoded sequences.

    Each pair contributes ``max(len(pred), len(ref))`` positions, so missing
    and surplus tokens both count as errors.
    """
    if len(predictions) != len(references):
        raise InputError("predictions and references differ in length")
    hits, total = 0, 0
    for pred, ref in zip(predictions, references):
        hits += sum(a == b for a, b in zip(pred, ref))
        total += max(len(pred), len(ref))
    if total == 0:
        raise InputError("no tokens to score")
    return hits / total


# ---------------------------------------------------------------------------
# vocabulary expansion

class Expansion(NamedTuple):
    tokens: list
    table: np.ndarray
    M: np.ndarray
    c: np.ndarray
    residual: float
    n_shared: int


def expand_vocab(pre_tokens, pre_table, model_tokens, model_table, l2=1e-6):
    """Map a pretrained embedding space into the model's word space by ridge regression.

    Fits ``e_w ~ M p_w + c`` on the shared tokens (``M`` is penalised,
    ``c`` is not), then maps every pretrained token. Shared tokens keep
    their own model embedding. ``residual`` is the RMS fit error on the
    shared tokens.
    """
    pre_table = np.asarray(pre_table, dtype=np.float64)
    model_table = np.asarray(model_table, dtype=np.float64)
    mindex = {t: i for i, t in enumerate(model_tokens)}
    shared = [(i, mindex[t]) for i, t in enumerate(pre_tokens) if t in mindex]
    if not shared:
        raise InputError("pretrained and model vocabularies share no tokens")
    P = pre_table[[i for i, _ in shared]]
    E = model_table[[j for _, j in shared]]
    n, dp = P.shape
    A = np.hstack([P, np.ones((n, 1))])
    reg = np.eye(dp + 1) * l2
    reg[dp, dp] = 0.0
    theta = np.linalg.solve(A.T @ A + reg, A.T @ E)
    M, c = theta[:dp], theta[dp]
    fit = A @ theta - E
    residual = float(np.sqrt(np.mean(fit * fit)))
    out = pre_table @ M + c
    for i, j in shared:
        out[i] = model_table[j]
    return Expansion(list(pre_tokens), out, M.T, c, residual, n)
