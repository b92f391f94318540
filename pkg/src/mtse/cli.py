"""``mtse`` command-line interface.

Reports go to stdout as JSON, artifacts to files and logs to stderr.
Failures print ``error: <category>: <message>`` and exit with status 1;
usage errors exit with status 2.
"""
import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from . import config as cfgmod
from . import corpus as C
from . import evalsuite as E
from ._jit import backend_name
from .errors import ConfigError, InputError, IOFailure, MTSEError
from .numcore import Rng
from .trainer import Trainer, grad_check_model, heldout_loss, load_model

log = logging.getLogger("mtse")

EVAL_KINDS = ("transfer", "sts", "pair")


def eval_threads():
    """Worker count for evaluation, bounded by ``MTSE_THREADS`` (default 1)."""
    raw = os.environ.get("MTSE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MTSE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("MTSE_THREADS must be >= 1")
    return n


def _parallel_map(fn, items):
    n = min(eval_threads(), len(items)) or 1
    if n == 1:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# helpers

def _load_config(args):
    cfg = cfgmod.load(args.config)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    return cfg


def _report(args, cfg, command, **fields):
    out = {"command": command, "config_hash": cfgmod.config_hash(cfg), "seed": cfg["train"]["seed"]}
    out.update(fields)
    json.dump(out, sys.stdout, sort_keys=True, indent=2)
    sys.stdout.write("\n")
    return 0


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise ConfigError(f"--{n.replace('_', '-')} is required for this command")


def _read_lines(path):
    seqs, skipped = C.load_lines(path)
    if skipped:
        log.warning("%s: skipped %d blank line(s)", path, skipped)
    return seqs


def _read_columns(path, n_cols):
    text = C.read_text_lines(path)
    rows = []
    for lineno, line in enumerate(text, 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != n_cols:
            raise C.FormatError(f"{path}:{lineno}: expected {n_cols} tab-separated columns, found {len(cols)}")
        rows.append(cols)
    if not rows:
        raise InputError(f"{path}: no data rows")
    return rows


def _label_ids(values):
    """Integer labels as given, otherwise ids of the sorted distinct strings."""
    try:
        return np.array([int(v) for v in values])
    except ValueError:
        names = sorted(set(values))
        return np.array([names.index(v) for v in values])


def _load_checkpoint(args):
    _require(args, "checkpoint")
    model, _ = load_model(args.checkpoint)
    return model


def _pooling(args, cfg):
    return args.pooling or cfg["eval"]["pooling"]


def _resolve_pooling(pooling, model, sentences, labels, seed):
    if pooling != "auto":
        return pooling, None
    if labels is None:
        raise ConfigError("--pooling auto needs labelled data to choose a strategy")
    scores = E.pooling_scores(model, sentences, labels, seed=seed)
    return E.choose_pooling(scores), scores


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    cfg = _load_config(args)
    _require(args, "out")
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {args.out}: {exc.strerror}") from exc
    seed = cfg["train"]["seed"]
    entries, written = [], []
    for task in cfg["tasks"]:
        if "synthetic" not in task["source"]:
            continue
        train, test = cfgmod.load_task(task, seed)
        files = {}
        for split, ds in (("train", train), ("test", test)):
            path = os.path.join(args.out, f"{task['name']}.{split}.tsv")
            C.save_parallel_tsv(ds, path)
            files[split] = os.path.basename(path)
            written.append(path)
            if ds.metadata is not None:
                mpath = os.path.join(args.out, f"{task['name']}.{split}.meta.jsonl")
                _write_meta(mpath, ds)
                files[f"{split}_meta"] = os.path.basename(mpath)
                written.append(mpath)
        entries.append({"name": task["name"], "kind": task["kind"], "weight": task["weight"], "files": files})
    manifest = os.path.join(args.out, "manifest.json")
    C.write_manifest(manifest, entries)
    return _report(args, cfg, "gen-data", manifest=manifest, files=sorted(written + [manifest]))


def _write_meta(path, ds):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for (src, _), meta in zip(ds.examples, ds.metadata):
            fh.write(json.dumps(dict(meta, sentence=" ".join(src)), sort_keys=True) + "\n")


def _apply_manifest(cfg, path):
    tasks = []
    for e in C.read_manifest(path):
        files = e["files"]
        tasks.append({"name": e["name"], "kind": e["kind"], "weight": e.get("weight"),
                      "source": {"files": {"train": files["train"], "test": files.get("test")}}})
    cfg["tasks"] = [cfgmod._task(t, i) for i, t in enumerate(tasks)]


def cmd_train(args):
    cfg = _load_config(args)
    if args.data:
        _apply_manifest(cfg, args.data)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    ckpt = args.checkpoint or os.path.join(out, "model.ckpt")
    log_path = os.path.join(out, "loss.tsv")
    specs, held = cfgmod.task_specs(cfg)
    tr = Trainer(cfgmod.train_config(cfg), specs, model_config=cfgmod.model_config(cfg))
    log.info("training %d updates on %s (backend %s)", tr.config.total_updates,
             ", ".join(s.name for s in specs), backend_name())

    def progress(t):
        if t.update % 500 == 0:
            recent = [entry[2] for entry in t.log[-500:]]
            log.info("update %d mean loss %.4f", t.update, float(np.mean(recent)))

    try:
        tr.run(checkpoint_path=ckpt, callback=progress)
    finally:
        tr.write_log(log_path)
    tr.save(ckpt)
    heldout = {name: _heldout_score(tr.model, name, ds) for name, ds in held.items() if ds is not None and len(ds)}
    return _report(args, cfg, "train", updates=tr.update, checkpoint=ckpt, loss_log=log_path, heldout=heldout)


def _heldout_score(model, name, ds):
    b = model.bindings[name]
    enc = C.encode_dataset(ds, model.src_vocab, b.tgt_vocab)
    if ds.kind == C.PAIR:
        pred = model.predict_pairs(name, [e[0] for e in ds.examples], [e[1] for e in ds.examples])
        return {"accuracy": float(np.mean(pred == np.array([e[2] for e in ds.examples])))}
    return {"teacher_forced_loss": heldout_loss(model, name, enc),
            "ln_vocab": math.log(len(b.tgt_vocab))}


def cmd_encode(args):
    cfg = _load_config(args)
    _require(args, "input", "out")
    model = _load_checkpoint(args)
    sentences = _read_lines(args.input)
    labels = None
    if args.labels:
        labels = _label_ids([" ".join(s) for s in _read_lines(args.labels)])
    pooling, scores = _resolve_pooling(_pooling(args, cfg), model, sentences, labels, cfg["train"]["seed"])
    rep = E.encode_corpus(model, sentences, pooling)
    E.save_representations(args.out, rep)
    return _report(args, cfg, "encode", out=args.out, n=rep.n, d=rep.d, pooling=pooling, pooling_scores=scores)


def _encode_columns(model, rows, pooling):
    return _parallel_map(lambda k: model.encode([r[k].split() for r in rows], pooling=pooling), [0, 1])


def cmd_eval(args):
    cfg = _load_config(args)
    _require(args, "data")
    model = _load_checkpoint(args)
    seed = cfg["train"]["seed"]
    pooling = _pooling(args, cfg)
    if args.benchmark == "transfer":
        rows = _read_columns(args.data, 2)
        sents = [r[0].split() for r in rows]
        y = _label_ids([r[1] for r in rows])
        pooling, scores = _resolve_pooling(pooling, model, sents, y, seed)
        X = model.encode(sents, pooling=pooling)
        res = E.logreg_cv_eval(X, y, folds=cfg["eval"]["folds"], l2_grid=tuple(cfg["eval"]["l2_grid"]), seed=seed)
        return _report(args, cfg, "eval", task="transfer", pooling=pooling, accuracy=res.test_accuracy,
                       cv_accuracy=res.cv_accuracy, best_l2=res.best_l2,
                       fold_accuracies=[float(a) for a in res.fold_accuracies[res.best_l2]],
                       cv_by_l2=[{"l2": l2, "accuracy": float(np.mean(a))} for l2, a in res.fold_accuracies.items()],
                       baseline=float(np.bincount(y).max() / len(y)))
    if args.benchmark == "sts":
        rows = _read_columns(args.data, 3)
        pooling = "last" if pooling == "auto" else pooling
        U, V = _encode_columns(model, rows, pooling)
        res = E.cosine_sts(U, V, [float(r[2]) for r in rows])
        return _report(args, cfg, "eval", task="sts", pooling=pooling, pearson=res.pearson,
                       n_zero_vectors=res.n_zero_vectors)
    rows = _read_columns(args.data, 3)
    y = _label_ids([r[2] for r in rows])
    pooling = "last" if pooling == "auto" else pooling
    U, V = _encode_columns(model, rows, pooling)
    acc = E.mlp_pair_eval(U, V, y, seed=seed)
    return _report(args, cfg, "eval", task="pair", pooling=pooling, accuracy=acc,
                   baseline=float(np.bincount(y).max() / len(y)))


def _read_probe_data(path):
    """Plain sentence lines, or JSON lines with a ``sentence`` field plus metadata."""
    if path.endswith(".jsonl"):
        text = C.read_text_lines(path)
        sents, meta = [], []
        for lineno, line in enumerate(text, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                sents.append(row.pop("sentence").split())
            except (json.JSONDecodeError, KeyError, AttributeError):
                raise C.FormatError(f"{path}:{lineno}: expected a JSON object with a 'sentence' field") from None
            meta.append(row)
        return sents, meta
    return _read_lines(path), None


def cmd_probe(args):
    cfg = _load_config(args)
    _require(args, "data")
    model = _load_checkpoint(args)
    seed = cfg["train"]["seed"]
    sents, meta = _read_probe_data(args.data)
    pooling = _pooling(args, cfg)
    pooling = "last" if pooling == "auto" else pooling
    reps = model.encode(sents, pooling=pooling)
    emb = model.params["enc.emb"]
    vocab = model.src_vocab
    n_tss = len(C.tss_classes(C.DEFAULT_GRAMMAR)) if args.kind == "tss" else None
    probe = E.make_probe_dataset(args.kind, sents, reps, meta, word_vec=lambda w: emb[vocab.id(w)],
                                 seed=seed, n_tss=n_tss)
    res = E.run_probe(probe, seed=seed, folds=cfg["eval"]["folds"])
    return _report(args, cfg, "probe", task=args.kind, pooling=pooling, accuracy=res.accuracy,
                   baseline=res.baseline, n_train=res.n_train, n_test=res.n_test)


def cmd_nn(args):
    cfg = _load_config(args)
    _require(args, "input")
    if (args.query is None) == (args.query_index is None):
        raise ConfigError("give exactly one of --query or --query-index")
    model = _load_checkpoint(args)
    sents = _read_lines(args.input)
    pooling = _pooling(args, cfg)
    pooling = "last" if pooling == "auto" else pooling
    M = model.encode(sents, pooling=pooling)
    if args.query_index is not None:
        if not 0 <= args.query_index < len(sents):
            raise InputError(f"--query-index {args.query_index} out of range for {len(sents)} sentences")
        q, qi, qtext = M[args.query_index], args.query_index, " ".join(sents[args.query_index])
    else:
        q = model.encode([args.query.split()], pooling=pooling)[0]
        qi, qtext = None, args.query
    idx = E.nearest_neighbors(q, M, args.k, query_index=qi)
    cos, _ = E.cosine_rows(np.repeat(q[None], len(idx), axis=0), M[idx])
    neighbors = [{"index": int(i), "cosine": float(c), "sentence": " ".join(sents[i])} for i, c in zip(idx, cos)]
    return _report(args, cfg, "nn", query=qtext, pooling=pooling, neighbors=neighbors)


def read_word_table(path):
    """Text word vectors: ``token v1 ... vd`` per line; ``d`` comes from the first line."""
    text = C.read_text_lines(path)
    tokens, rows, d = [], [], None
    for lineno, line in enumerate(text, 1):
        parts = line.split()
        if not parts:
            continue
        if d is None:
            d = len(parts) - 1
            if d < 1:
                raise C.FormatError(f"{path}:{lineno}: no vector values")
        if len(parts) - 1 != d:
            raise C.FormatError(f"{path}:{lineno}: expected {d} values, found {len(parts) - 1}")
        try:
            rows.append([float(x) for x in parts[1:]])
        except ValueError:
            raise C.FormatError(f"{path}:{lineno}: non-numeric vector value") from None
        tokens.append(parts[0])
    if not tokens:
        raise InputError(f"{path}: empty word table")
    return tokens, np.array(rows)


def write_word_table(path, tokens, table):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tok, row in zip(tokens, table):
            fh.write(tok + " " + " ".join(repr(float(x)) for x in row) + "\n")


def cmd_expand_vocab(args):
    cfg = _load_config(args)
    _require(args, "input", "out")
    model = _load_checkpoint(args)
    tokens, table = read_word_table(args.input)
    words = model.src_vocab.tokens[len(C.SPECIALS):]
    emb = model.params["enc.emb"][len(C.SPECIALS):]
    res = E.expand_vocab(tokens, table, words, emb)
    write_word_table(args.out, res.tokens, res.table)
    return _report(args, cfg, "expand-vocab", out=args.out, n_tokens=len(res.tokens), n_shared=res.n_shared,
                   residual=res.residual)


def cmd_grad_check(args):
    cfg = _load_config(args)
    specs, _ = cfgmod.task_specs(cfg)
    tr = Trainer(cfgmod.train_config(cfg), specs, model_config=cfgmod.model_config(cfg))
    model = tr.model
    batches = {}
    for s in specs:
        enc = tr.encoded[s.name]
        batches[s.name] = C.make_batch(enc[:args.batch])
    res = grad_check_model(model, batches, eps=args.eps, tol=args.tol, rng=Rng(cfg["train"]["seed"]))
    _report(args, cfg, "grad-check", passed=res["passed"], worst=res["worst"], eps=res["eps"], tol=res["tol"],
            failed=res["failed"], n_params=int(sum(v.size for v in model.params.values())))
    return 0 if res["passed"] else 1


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: usage: {message}\n")
        sys.exit(2)


def _common(p):
    p.add_argument("--config", metavar="PATH", help="run configuration (JSON); defaults apply when omitted")
    p.add_argument("--seed", type=int, metavar="N", help="override train.seed from the config")
    p.add_argument("--out", metavar="PATH", help="output file or directory")
    p.add_argument("--checkpoint", metavar="PATH", help="model checkpoint to read (or write, for train)")
    p.add_argument("--pooling", choices=("last", "max", "auto"), help="sentence pooling strategy")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")


def build_parser():
    parser = _Parser(prog="mtse", description="Multi-task sentence encoder: data, training and evaluation.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="write the synthetic corpora and a manifest")
    _common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model; writes a checkpoint and a loss log")
    _common(p)
    p.add_argument("--data", metavar="MANIFEST", help="train on the files listed in a manifest")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("encode", help="encode sentences into a representation file")
    _common(p)
    p.add_argument("--input", metavar="PATH", help="one sentence per line")
    p.add_argument("--labels", metavar="PATH", help="one label per line, used by --pooling auto")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("eval", help="transfer, sts or pair evaluation on frozen representations")
    _common(p)
    p.add_argument("benchmark", choices=EVAL_KINDS)
    p.add_argument("--data", metavar="PATH",
                   help="TSV: sentence,label (transfer); s1,s2,score (sts); s1,s2,label (pair)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("probe", help="probe representations for a sentence property")
    _common(p)
    p.add_argument("kind", choices=E.PROBE_KINDS)
    p.add_argument("--data", metavar="PATH", help="sentence lines, or .jsonl rows with 'sentence' and metadata")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("nn", help="nearest neighbours of a query sentence by cosine")
    _common(p)
    p.add_argument("--input", metavar="PATH", help="corpus, one sentence per line")
    p.add_argument("--query", metavar="TEXT", help="query sentence")
    p.add_argument("--query-index", type=int, metavar="I", help="use corpus row I as the query")
    p.add_argument("--k", type=int, default=5, metavar="K", help="number of neighbours (default 5)")
    p.set_defaults(fn=cmd_nn)

    p = sub.add_parser("expand-vocab", help="map pretrained word vectors into the encoder's word space")
    _common(p)
    p.add_argument("--input", metavar="PATH", help="word table: 'token v1 ... vd' per line")
    p.set_defaults(fn=cmd_expand_vocab)

    p = sub.add_parser("grad-check", help="finite-difference check of every gradient")
    _common(p)
    p.add_argument("--batch", type=int, default=2, metavar="N", help="examples per task (default 2)")
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step (default 1e-5)")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error (default 1e-4)")
    p.set_defaults(fn=cmd_grad_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="# %(asctime)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except MTSEError as exc:
        sys.stderr.write(f"error: {exc.category}: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
