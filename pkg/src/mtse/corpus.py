"""Vocabularies, file ingestion, batching and synthetic task generators.

The generators are pure functions of their arguments; each one builds its
own :class:`~mtse.numcore.Rng` from the seed it is given.
"""
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError, IOFailure

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")

SEQ2SEQ = "seq2seq"
PAIR = "pair"
KINDS = (SEQ2SEQ, PAIR)

NLI_LABELS = ("entailment", "contradiction", "neutral")


class Vocabulary:
    """Token/id bijection with the four reserved ids first."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise InputError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token):
        return self.index.get(token, UNK)

    def encode(self, tokens):
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def __repr__(self):
        return f"Vocabulary({len(self)} tokens)"


def build_vocab(lines, max_size=1_000_000, min_count=1):
    """Frequency-ordered vocabulary; ties are broken lexicographically."""
    if max_size <= 4:
        raise InputError("max_size must exceed the 4 reserved tokens")
    counts = Counter()
    for line in lines:
        counts.update(line.split() if isinstance(line, str) else line)
    for tok in SPECIALS:
        counts.pop(tok, None)
    if not counts:
        raise InputError("cannot build a vocabulary from an empty corpus")
    ranked = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + ranked[: max_size - 4])


@dataclass
class TaskDataset:
    """A named corpus for one training objective.

    ``examples`` are ``(source, target)`` token-list pairs for seq2seq tasks
    and ``(premise, hypothesis, label)`` triples for pair classification.
    ``metadata`` is optional and row-aligned with ``examples``.
    """

    name: str
    kind: str
    examples: list
    metadata: list = None
    skipped_lines: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown task kind {self.kind!r}")
        for i, ex in enumerate(self.examples):
            if any(len(seq) == 0 for seq in ex[:2]):
                raise InputError(f"{self.name}: empty token sequence in example {i}")
            if self.kind == PAIR and not 0 <= ex[2] < len(NLI_LABELS):
                raise InputError(f"{self.name}: label {ex[2]} out of range in example {i}")

    def __len__(self):
        return len(self.examples)

    def source_sentences(self):
        if self.kind == SEQ2SEQ:
            return [ex[0] for ex in self.examples]
        return [s for ex in self.examples for s in ex[:2]]

    def target_sentences(self):
        return [ex[1] for ex in self.examples] if self.kind == SEQ2SEQ else []

    def split(self, n_first):
        """Split off the first ``n_first`` examples (generators shuffle already)."""
        meta = self.metadata
        a = TaskDataset(self.name, self.kind, self.examples[:n_first], None if meta is None else meta[:n_first], info=dict(self.info))
        b = TaskDataset(self.name, self.kind, self.examples[n_first:], None if meta is None else meta[n_first:], info=dict(self.info))
        return a, b


# ---------------------------------------------------------------------------
# batching

def encode_dataset(ds, src_vocab, tgt_vocab=None):
    if ds.kind == SEQ2SEQ:
        return [(src_vocab.encode(s), tgt_vocab.encode(t)) for s, t in ds.examples]
    return [(src_vocab.encode(p), src_vocab.encode(h), int(y)) for p, h, y in ds.examples]


def make_batch(rows):
    """Turn encoded examples into ``(src, tgt)`` or ``(prem, hyp, labels)``."""
    from .encoder import SentenceBatch

    if len(rows[0]) == 2:
        return (SentenceBatch.from_sequences([r[0] for r in rows]),
                SentenceBatch.from_sequences([r[1] for r in rows]))
    return (SentenceBatch.from_sequences([r[0] for r in rows]),
            SentenceBatch.from_sequences([r[1] for r in rows]),
            np.array([r[2] for r in rows], dtype=np.int64))


def batchify(encoded, batch_size, rng):
    """One shuffled epoch of padded batches; the last short batch is kept."""
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    order = rng.permutation(len(encoded))
    return [make_batch([encoded[j] for j in order[i:i + batch_size]])
            for i in range(0, len(order), batch_size)]


# ---------------------------------------------------------------------------
# synthetic generators

def word_tokens(prefix, vocab_size):
    """The ``vocab_size - 4`` content tokens of a synthetic vocabulary."""
    if vocab_size < 5:
        raise InputError("vocab_size must be >= 5")
    width = len(str(vocab_size - 5))
    return [f"{prefix}{i:0{width}d}" for i in range(vocab_size - 4)]


def _rng(seed):
    from .numcore import Rng

    return Rng(seed)


def gen_cipher_task(seed, vocab_size=64, n=5000, length_range=(3, 10), reverse=False,
                    name="cipher", src_prefix="w", tgt_prefix="t"):
    """Token-level substitution cipher; optionally reverses the target order.

    Source tokens are uniform over the content vocabulary and each maps
    through a fixed seeded bijection into a disjoint target vocabulary.
    """
    rng = _rng(seed)
    src = word_tokens(src_prefix, vocab_size)
    tgt = word_tokens(tgt_prefix, vocab_size)
    perm = rng.permutation(len(src))
    mapping = {s: tgt[perm[i]] for i, s in enumerate(src)}
    lo, hi = length_range
    examples = []
    for _ in range(n):
        L = int(rng.integers(lo, hi + 1))
        s = [src[j] for j in rng.integers(0, len(src), L)]
        t = [mapping[w] for w in s]
        if reverse:
            t.reverse()
        examples.append((s, t))
    return TaskDataset(name, SEQ2SEQ, examples, info={"mapping": mapping, "reverse": reverse})


def cipher_apply(mapping, tokens, reverse):
    out = [mapping[t] for t in tokens]
    return out[::-1] if reverse else out


def markov_chain(seed, vocab_size=64, branching=2, src_prefix="w"):
    """Sparse random transition table: token -> list of successors."""
    rng = _rng(seed)
    toks = word_tokens(src_prefix, vocab_size)
    succ = {}
    for t in toks:
        idx = rng.permutation(len(toks))[:branching]
        succ[t] = [toks[j] for j in sorted(idx)]
    return toks, succ


def gen_books(seed, n_books=200, sentences_per_book=20, vocab_size=64, branching=2,
              length_range=(3, 10), src_prefix="w", names=("stn", "stp")):
    """Books of Markov-chain sentences; returns (next-sentence, previous-sentence) tasks.

    Each sentence continues the chain from the last token of the sentence
    before it, so adjacent sentences are dependent. Pairs never cross books.
    """
    if sentences_per_book < 2:
        raise InputError("sentences_per_book must be >= 2")
    rng = _rng(seed)
    toks, succ = markov_chain(rng.spawn_seed(), vocab_size, branching, src_prefix)
    lo, hi = length_range
    stn = []
    books = []
    for _ in range(n_books):
        cur = rng.choice(toks)
        book = []
        for _ in range(sentences_per_book):
            L = int(rng.integers(lo, hi + 1))
            sent = []
            for _ in range(L):
                sent.append(cur)
                cur = rng.choice(succ[cur])
            book.append(sent)
        books.append(book)
        stn.extend((book[k], book[k + 1]) for k in range(len(book) - 1))
    stp = [(b, a) for a, b in stn]
    info = {"successors": succ, "books": len(books)}
    return (TaskDataset(names[0], SEQ2SEQ, stn, info=dict(info)),
            TaskDataset(names[1], SEQ2SEQ, stp, info=dict(info)))


def markov_sentence_sampler(seed, vocab_size=64, branching=2, length_range=(3, 10), src_prefix="w"):
    """Return ``sample(rng) -> tokens`` drawing single sentences from a Markov chain."""
    toks, succ = markov_chain(seed, vocab_size, branching, src_prefix)
    lo, hi = length_range

    def sample(rng):
        L = int(rng.integers(lo, hi + 1))
        cur = rng.choice(toks)
        out = []
        for _ in range(L):
            out.append(cur)
            cur = rng.choice(succ[cur])
        return out

    return sample


def uniform_sentence_sampler(vocab_size=64, length_range=(3, 10), src_prefix="w"):
    toks = word_tokens(src_prefix, vocab_size)
    lo, hi = length_range

    def sample(rng):
        L = int(rng.integers(lo, hi + 1))
        return [toks[j] for j in rng.integers(0, len(toks), L)]

    return sample


def antonym_table(tokens):
    """Pair consecutive tokens: t0<->t1, t2<->t3, ... (odd tail maps to itself)."""
    table = {}
    for i in range(0, len(tokens) - 1, 2):
        table[tokens[i]] = tokens[i + 1]
        table[tokens[i + 1]] = tokens[i]
    return table


MAX_RESAMPLE = 1000


def gen_nli(seed, n=3000, sampler=None, antonyms=None, name="nli"):
    """Balanced three-way pair classification.

    entailment: the hypothesis is a strictly shorter contiguous span of the
    premise; contradiction: one premise token swapped for its antonym;
    neutral: an independently sampled sentence.
    """
    rng = _rng(seed)
    if sampler is None:
        sampler = uniform_sentence_sampler()
    if antonyms is None:
        antonyms = antonym_table(word_tokens("w", 64))
    k = n // 3
    labels = [0] * k + [1] * k + [2] * (n - 2 * k)
    labels = [labels[i] for i in rng.permutation(n)]
    examples = []
    for y in labels:
        for _ in range(MAX_RESAMPLE):
            p = sampler(rng)
            slots = [i for i, t in enumerate(p) if antonyms.get(t, t) != t]
            if len(p) >= 2 and (y != 1 or slots):
                break
        else:
            raise InputError(f"{name}: sampler produced no usable premise in {MAX_RESAMPLE} draws "
                             "(sentences shorter than 2 tokens, or no token with an antonym)")
        if y == 0:
            L = int(rng.integers((len(p) + 1) // 2, len(p)))
            start = int(rng.integers(0, len(p) - L + 1))
            h = p[start:start + L]
        elif y == 1:
            i = slots[int(rng.integers(len(slots)))]
            h = list(p)
            h[i] = antonyms[p[i]]
        else:
            h = sampler(rng)
        examples.append((p, h, y))
    return TaskDataset(name, PAIR, examples, info={"antonyms": antonyms})


# --- PCFG parsing ----------------------------------------------------------
#
# A grammar maps a nonterminal to a list of rules ``(weight, rhs, tags)``.
# Symbols not in the grammar are terminals. Nonterminals whose name starts
# with "_" are spliced into their parent when linearised; the printed label
# of any other nonterminal is the part of its name before "~".

DEFAULT_GRAMMAR = {
    "S": [
        (0.4, ("NP", "VP"), {}),
        (0.2, ("NP", "VP", "PP"), {}),
        (0.2, ("ADVP", "NP", "VP"), {}),
        (0.2, ("PP", "NP", "VP"), {}),
    ],
    "NP": [
        (0.45, ("_DET", "_N"), {}),
        (0.35, ("_DET", "_ADJ", "_N"), {}),
        (0.2, ("_DET", "_N", "PP"), {}),
    ],
    "PP": [(1.0, ("_P", "NP"), {})],
    "ADVP": [(1.0, ("_ADV",), {})],
    "VP": [
        (0.6, ("_ACT",), {"voice": "active"}),
        (0.4, ("_PASS",), {"voice": "passive"}),
    ],
    "_ACT": [(0.6, ("_TV", "NP"), {}), (0.4, ("_IV",), {})],
    "_PASS": [(0.5, ("_AUX", "_PART"), {}), (0.5, ("_AUX", "_PART", "PP"), {})],
    "_TV": [(0.5, ("saw",), {"tense": "past"}), (0.5, ("chased",), {"tense": "past"}),
            (0.5, ("sees",), {"tense": "present"}), (0.5, ("chases",), {"tense": "present"})],
    "_IV": [(0.5, ("slept",), {"tense": "past"}), (0.5, ("ran",), {"tense": "past"}),
            (0.5, ("sleeps",), {"tense": "present"}), (0.5, ("runs",), {"tense": "present"})],
    "_AUX": [(0.5, ("was",), {"tense": "past"}), (0.5, ("is",), {"tense": "present"})],
    "_PART": [(1.0, ("seen",), {}), (1.0, ("chased",), {}), (1.0, ("found",), {}), (1.0, ("taken",), {})],
    "_DET": [(1.0, ("the",), {}), (1.0, ("a",), {})],
    "_N": [(1.0, (w,), {}) for w in ("dog", "cat", "bird", "man", "woman", "child", "car", "ball")],
    "_ADJ": [(1.0, (w,), {}) for w in ("big", "small", "red", "old")],
    "_P": [(1.0, (w,), {}) for w in ("in", "on", "near", "by")],
    "_ADV": [(1.0, (w,), {}) for w in ("yesterday", "today", "often")],
}


def _label(sym):
    return sym.split("~")[0]


def tss_classes(grammar, start="S"):
    """Distinct top-level child sequences of the start symbol, in rule order."""
    seen = []
    for _, rhs, _ in grammar[start]:
        key = " ".join(_label(s) for s in rhs)
        if key not in seen:
            seen.append(key)
    return seen


def _derive(grammar, sym, rng, depth, max_depth, tags):
    """Return a tree ``(label, children)``; terminals are plain strings."""
    if depth > max_depth:
        raise RecursionError
    rules = grammar[sym]
    w = np.array([r[0] for r in rules], dtype=np.float64)
    u = rng.random() * w.sum()
    k = min(int(np.searchsorted(np.cumsum(w), u, side="right")), len(rules) - 1)
    _, rhs, rtags = rules[k]
    for key, val in rtags.items():
        tags.setdefault(key, val)
    children = []
    for s in rhs:
        if s in grammar:
            sub = _derive(grammar, s, rng, depth + 1, max_depth, tags)
            if s.startswith("_"):
                children.extend(sub[1])
            else:
                children.append(sub)
        else:
            children.append(s)
    return (_label(sym), children)


def tree_yield(tree):
    if isinstance(tree, str):
        return [tree]
    return [w for c in tree[1] for w in tree_yield(c)]


def linearize(tree):
    if isinstance(tree, str):
        return [tree]
    out = ["(", tree[0]]
    for c in tree[1]:
        out.extend(linearize(c))
    out.append(")")
    return out


def delinearize(tokens):
    """Parse ``( S ( NP the dog ) ... )`` back into a tree; raises on malformed input."""
    pos = 0

    def node():
        nonlocal pos
        if pos >= len(tokens) or tokens[pos] != "(":
            raise FormatError(f"expected '(' at position {pos}")
        if pos + 1 >= len(tokens) or tokens[pos + 1] in ("(", ")"):
            raise FormatError(f"missing label at position {pos + 1}")
        label = tokens[pos + 1]
        pos += 2
        children = []
        while True:
            if pos >= len(tokens):
                raise FormatError("unbalanced brackets")
            tok = tokens[pos]
            if tok == ")":
                pos += 1
                break
            if tok == "(":
                children.append(node())
            else:
                children.append(tok)
                pos += 1
        if not children:
            raise FormatError(f"empty constituent {label}")
        return (label, children)

    tree = node()
    if pos != len(tokens):
        raise FormatError("trailing tokens after the root constituent")
    return tree


def is_well_formed(tokens):
    try:
        delinearize(tokens)
    except FormatError:
        return False
    return True


def gen_pcfg_parsing(seed, grammar=None, n=5000, start="S", max_depth=12, max_tries=100, name="parse"):
    """Sentences from a PCFG paired with their linearized trees.

    Each example carries metadata: length, voice, tense and top syntactic
    sequence (``tss``, an index into :func:`tss_classes`).
    """
    grammar = DEFAULT_GRAMMAR if grammar is None else grammar
    rng = _rng(seed)
    classes = tss_classes(grammar, start)
    examples, meta = [], []
    for _ in range(n):
        for _ in range(max_tries):
            tags = {}
            try:
                tree = _derive(grammar, start, rng, 0, max_depth, tags)
            except RecursionError:
                continue
            break
        else:
            raise InputError(f"grammar exceeded depth {max_depth} in {max_tries} consecutive draws")
        src = tree_yield(tree)
        top = " ".join(c if isinstance(c, str) else c[0] for c in tree[1])
        meta.append({
            "length": len(src),
            "voice": tags.get("voice"),
            "tense": tags.get("tense"),
            "tss": classes.index(top) if top in classes else len(classes),
            "tss_seq": top,
        })
        examples.append((src, linearize(tree)))
    return TaskDataset(name, SEQ2SEQ, examples, meta, info={"tss_classes": classes})


# ---------------------------------------------------------------------------
# file formats

def read_text_lines(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc.strerror}") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not valid UTF-8 ({exc.reason} at byte {exc.start})") from exc
    return text.replace("\r\n", "\n").split("\n")


def load_lines(path):
    """Whitespace-tokenised lines; returns ``(sequences, skipped_blank_lines)``."""
    seqs, skipped = [], 0
    lines = read_text_lines(path)
    if lines and lines[-1] == "":
        lines.pop()
    for line in lines:
        toks = line.split()
        if not toks:
            skipped += 1
            continue
        seqs.append(toks)
    if skipped:
        log.warning("%s: skipped %d blank line(s)", path, skipped)
    return seqs, skipped


def load_parallel_tsv(path, name=None, kind=SEQ2SEQ):
    """``source<TAB>target`` rows, or ``premise<TAB>hypothesis<TAB>label`` for pair tasks."""
    name = name or os.path.splitext(os.path.basename(path))[0]
    ncol = 2 if kind == SEQ2SEQ else 3
    examples, skipped = [], 0
    lines = read_text_lines(path)
    if lines and lines[-1] == "":
        lines.pop()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            skipped += 1
            continue
        cols = line.split("\t")
        if len(cols) != ncol:
            raise FormatError(f"{path}:{lineno}: expected {ncol} tab-separated columns, found {len(cols)}")
        seqs = [c.split() for c in cols[:2]]
        if not seqs[0] or not seqs[1]:
            raise FormatError(f"{path}:{lineno}: empty sentence")
        if kind == SEQ2SEQ:
            examples.append((seqs[0], seqs[1]))
        else:
            lab = cols[2].strip()
            if lab not in NLI_LABELS:
                raise FormatError(f"{path}:{lineno}: unknown label {lab!r}")
            examples.append((seqs[0], seqs[1], NLI_LABELS.index(lab)))
    if skipped:
        log.warning("%s: skipped %d blank line(s)", path, skipped)
    return TaskDataset(name, kind, examples, skipped_lines=skipped)


def save_parallel_tsv(ds, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in ds.examples:
            cols = [" ".join(ex[0]), " ".join(ex[1])]
            if ds.kind == PAIR:
                cols.append(NLI_LABELS[ex[2]])
            fh.write("\t".join(cols) + "\n")


def write_manifest(path, entries):
    """Entries: dicts with ``name``, ``kind``, ``weight`` and ``files``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"tasks": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("tasks"), list):
        raise FormatError(f"{path}: manifest must be an object with a 'tasks' list")
    base = os.path.dirname(os.path.abspath(path))
    for entry in doc["tasks"]:
        for key in ("name", "kind", "files"):
            if key not in entry:
                raise FormatError(f"{path}: task entry missing {key!r}")
        entry["files"] = {k: v if os.path.isabs(v) else os.path.join(base, v) for k, v in entry["files"].items()}
    return doc["tasks"]
