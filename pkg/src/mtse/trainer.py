"""Multi-task training loop, checkpoints and the gradient-check harness.

Each update trains on one minibatch. Sequence-to-sequence tasks are drawn
from a categorical distribution; when a pair-classification task is
configured, every ``nli_every`` seq2seq updates are followed by exactly one
pair-task update.
"""
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import PAIR, SEQ2SEQ, build_vocab, encode_dataset, make_batch
from .errors import ConfigError, FormatError, IOFailure, NumericError
from .model import ModelConfig, MultiTaskModel, TaskBinding
from .numcore import AdamState, Rng, adam_step, clip_by_global_norm, finite_diff_grad, relative_error

log = logging.getLogger(__name__)

MAGIC = b"MTSE"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 0.002
    nli_every: int = 10
    total_updates: int = 1000
    grad_clip_norm: float = 5.0
    seed: int = 0
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.nli_every < 1:
            raise ConfigError("nli_every must be >= 1")
        if self.total_updates < 0:
            raise ConfigError("total_updates must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class TaskSpec:
    name: str
    kind: str
    dataset: object
    weight: float = None
    info: dict = field(default_factory=dict)


def sample_task(alpha, rng):
    """Categorical draw of a task index from probability vector ``alpha``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or alpha.size == 0 or (alpha < 0).any() or abs(alpha.sum() - 1.0) > 1e-9:
        raise ConfigError(f"task probabilities must be non-negative and sum to 1, got {alpha.tolist()}")
    u = rng.random()
    k = int(np.searchsorted(np.cumsum(alpha), u, side="right"))
    return min(k, alpha.size - 1)


def is_pair_update(u, nli_every):
    """True when update ``u`` (1-based) is the interspersed pair-task update."""
    return u % (nli_every + 1) == 0


def task_probabilities(specs):
    """Normalised seq2seq sampling weights; uniform when no weights are given."""
    seq = [s for s in specs if s.kind == SEQ2SEQ]
    if not seq:
        raise ConfigError("at least one seq2seq task is required")
    w = np.array([1.0 if s.weight is None else float(s.weight) for s in seq])
    if (w < 0).any() or w.sum() <= 0:
        raise ConfigError("task weights must be non-negative with a positive sum")
    return w / w.sum()


def build_model(model_config, specs, rng):
    src = build_vocab(s for spec in specs for s in spec.dataset.source_sentences())
    bindings = []
    for spec in specs:
        if spec.kind == SEQ2SEQ:
            bindings.append(TaskBinding(spec.name, SEQ2SEQ, build_vocab(spec.dataset.target_sentences())))
        else:
            bindings.append(TaskBinding(spec.name, PAIR))
    return MultiTaskModel.create(model_config, src, bindings, rng)


class Trainer:
    """Stateful training loop; every source of randomness is ``self.rng``."""

    def __init__(self, config, specs, model=None, model_config=None):
        self.config = config
        self.specs = list(specs)
        self.rng = Rng(config.seed)
        if model is None:
            model = build_model(model_config or ModelConfig(), self.specs, self.rng)
        self.model = model
        self.seq_specs = [s for s in self.specs if s.kind == SEQ2SEQ]
        self.pair_specs = [s for s in self.specs if s.kind == PAIR]
        self.alpha = task_probabilities(self.specs)
        self.encoded = {}
        for s in self.specs:
            b = model.bindings[s.name]
            self.encoded[s.name] = encode_dataset(s.dataset, model.src_vocab, b.tgt_vocab)
        self.streams = {s.name: [np.zeros(0, dtype=np.int64), 0] for s in self.specs}
        self.adam = AdamState(model.params)
        self.update = 0
        self.pair_updates = 0
        self.log = []

    # -- scheduling -------------------------------------------------------

    def next_task(self):
        u = self.update + 1
        if self.pair_specs and is_pair_update(u, self.config.nli_every):
            spec = self.pair_specs[self.pair_updates % len(self.pair_specs)]
            self.pair_updates += 1
            return spec
        return self.seq_specs[sample_task(self.alpha, self.rng)]

    def next_batch(self, name):
        stream = self.streams[name]
        data = self.encoded[name]
        if stream[1] >= stream[0].size:
            stream[0] = self.rng.permutation(len(data))
            stream[1] = 0
        order, pos = stream
        rows = [data[j] for j in order[pos:pos + self.config.batch_size]]
        stream[1] = pos + len(rows)
        return make_batch(rows)

    # -- updates ------------------------------------------------------------

    def step(self):
        spec = self.next_task()
        batch = self.next_batch(spec.name)
        masks = self.model.draw_masks(spec.name, batch, self.rng)
        loss, partial = self.model.loss(spec.name, batch, masks=masks)
        if not math.isfinite(loss):
            self.log.append((self.update + 1, spec.name, loss))
            raise NumericError(f"non-finite loss at update {self.update + 1} on task {spec.name}", op=spec.name)
        grads = {k: partial[k] if k in partial else np.zeros_like(v) for k, v in self.model.params.items()}
        clip_by_global_norm(grads, self.config.grad_clip_norm)
        c = self.config
        adam_step(self.model.params, grads, self.adam, c.lr, c.beta1, c.beta2, c.adam_eps)
        self.update += 1
        self.log.append((self.update, spec.name, loss))
        return spec.name, loss

    def run(self, n_updates=None, checkpoint_path=None, callback=None):
        target = self.config.total_updates if n_updates is None else self.update + n_updates
        every = self.config.checkpoint_every
        while self.update < target:
            self.step()
            if checkpoint_path and every and self.update % every == 0:
                self.save(checkpoint_path)
            if callback is not None:
                callback(self)
        return self.model

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        records = [(f"param/{k}", v) for k, v in self.model.params.items()]
        records += [(f"__adam__/m/{k}", v) for k, v in self.adam.m.items()]
        records += [(f"__adam__/v/{k}", v) for k, v in self.adam.v.items()]
        records.append(("__rng__/state", np.array(self.rng.get_state_words(), dtype=np.float64)))
        for name, (order, pos) in self.streams.items():
            records.append((f"__stream__/{name}/order", order.astype(np.float64)))
            records.append((f"__stream__/{name}/pos", np.array([float(pos)])))
        header = {
            "train": asdict(self.config),
            "meta": self.model.meta(),
            "tasks": [{"name": s.name, "kind": s.kind, "weight": s.weight} for s in self.specs],
            "state": {"update": self.update, "pair_updates": self.pair_updates, "adam_t": self.adam.t},
            "n_records": len(records),
        }
        write_checkpoint(path, header, records)

    @classmethod
    def resume(cls, path, specs):
        header, records = read_checkpoint(path)
        config = TrainConfig(**header["train"])
        model = model_from_checkpoint(header, records)
        tr = cls(config, specs, model=model)
        st = header["state"]
        tr.update = st["update"]
        tr.pair_updates = st["pair_updates"]
        tr.adam.t = st["adam_t"]
        for k in model.params:
            tr.adam.m[k] = records[f"__adam__/m/{k}"]
            tr.adam.v[k] = records[f"__adam__/v/{k}"]
        tr.rng.set_state_words(records["__rng__/state"])
        for name in tr.streams:
            tr.streams[name] = [records[f"__stream__/{name}/order"].astype(np.int64),
                                int(records[f"__stream__/{name}/pos"][0])]
        return tr

    def write_log(self, path):
        write_loss_log(path, self.log)


def train(config, specs, model=None, model_config=None, log_path=None, checkpoint_path=None):
    """Run ``config.total_updates`` updates; returns ``(model, loss_log)``."""
    tr = Trainer(config, specs, model=model, model_config=model_config)
    try:
        tr.run(checkpoint_path=checkpoint_path)
    finally:
        if log_path:
            tr.write_log(log_path)
    if checkpoint_path:
        tr.save(checkpoint_path)
    return tr.model, tr.log


def heldout_loss(model, name, encoded, batch_size=100):
    """Token-weighted mean teacher-forced cross-entropy over an encoded dataset."""
    total, count = 0.0, 0
    for i in range(0, len(encoded), batch_size):
        batch = make_batch(encoded[i:i + batch_size])
        n_tok = int(batch[1].lengths.sum() + batch[1].size)
        total += model.loss(name, batch, with_grad=False) * n_tok
        count += n_tok
    return total / count


def write_loss_log(path, entries):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("update\ttask\tloss\n")
        for u, name, loss in entries:
            fh.write(f"{u}\t{name}\t{loss!r}\n")


# ---------------------------------------------------------------------------
# checkpoint format
#
#   "MTSE" | u32 version | u32 json length | json bytes |
#   records: u32 name length | name | u32 rank | u32 dims[rank] | f64 values

def write_checkpoint(path, header, records):
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob]
    for name, arr in records:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc.strerror}") from exc


def read_checkpoint(path):
    """Return ``(header, {name: array})``; nothing is returned on a malformed file."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated at byte {pos}")
        out = data[pos:pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version} found, expected {FORMAT_VERSION}")
    (hlen,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    records = {}
    while pos < len(data):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        records[name] = arr
    if len(records) != header.get("n_records", len(records)):
        raise FormatError(f"{path}: expected {header['n_records']} records, found {len(records)}")
    return header, records


def model_from_checkpoint(header, records):
    params = {k[len("param/"):]: v.copy() for k, v in records.items() if k.startswith("param/")}
    return MultiTaskModel.from_meta(header["meta"], params)


def load_model(path):
    header, records = read_checkpoint(path)
    return model_from_checkpoint(header, records), header


def save_model(model, path, extra=None):
    """Checkpoint holding only model tensors (no optimiser or RNG state)."""
    records = [(f"param/{k}", v) for k, v in model.params.items()]
    header = {"meta": model.meta(), "n_records": len(records)}
    if extra:
        header.update(extra)
    write_checkpoint(path, header, records)


# ---------------------------------------------------------------------------
# gradient check

def grad_check_model(model, batches, eps=1e-5, tol=1e-4, rng=None, analytic_hook=None):
    """Compare analytic and central-difference gradients of the summed task losses.

    ``batches`` maps task name to one small minibatch. Dropout masks for
    pair tasks are drawn once from ``rng`` and held fixed. Returns a dict
    with per-tensor ``errors``, the ``worst`` error and ``passed``.
    """
    rng = rng or Rng(0)
    masks = {name: model.draw_masks(name, b, rng) for name, b in batches.items()}

    def task_loss(name, with_grad):
        return model.loss(name, batches[name], with_grad=with_grad, masks=masks[name])

    analytic, owners = {}, {}
    for name in batches:
        _, grads = task_loss(name, True)
        for k, g in grads.items():
            analytic[k] = analytic[k] + g if k in analytic else g.copy()
            owners.setdefault(k, []).append(name)
    analytic = {k: analytic.get(k, np.zeros_like(v)) for k, v in model.params.items()}
    if analytic_hook is not None:
        analytic = analytic_hook(analytic)

    # a tensor read by a single task only needs that task's loss re-evaluated
    groups = {}
    for k in model.params:
        users = owners.get(k, [])
        groups.setdefault(users[0] if len(users) == 1 else None, []).append(k)
    numeric = {}
    for name, keys in groups.items():
        if name is None:
            fn = lambda p: sum(task_loss(t, False) for t in batches)
        else:
            fn = lambda p, name=name: task_loss(name, False)
        numeric.update(finite_diff_grad(fn, model.params, eps, names=keys))
    errors = {k: relative_error(analytic[k], numeric[k]) for k in model.params}
    worst = max(errors.values()) if errors else 0.0
    return {"errors": errors, "worst": worst, "failed": sorted(k for k, e in errors.items() if e >= tol),
            "passed": worst < tol, "eps": eps, "tol": tol}
