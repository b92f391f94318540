"""Run configuration: a strict JSON schema with desk-scale defaults.

Unknown keys anywhere are rejected. Missing keys take the defaults below.
``FULL_SCALE`` records the hyperparameters of the large-scale setup for
reference; the defaults are shrunk so a run finishes in minutes on a CPU.
"""
import copy
import hashlib
import json

from . import corpus as C
from .errors import ConfigError, IOFailure
from .evalsuite import L2_GRID
from .model import ModelConfig
from .trainer import TaskSpec, TrainConfig

MODEL_DEFAULTS = {"emb_dim": 32, "H_enc": 64, "H_dec": 64, "layers": 1, "head_hidden": [64], "head_dropout": 0.3}
TRAIN_DEFAULTS = {"batch": 16, "lr": 0.002, "updates": 10000, "nli_every": 10, "clip": 5.0, "seed": 0,
                  "checkpoint_every": 0}
EVAL_DEFAULTS = {"pooling": "auto", "folds": 10, "l2_grid": list(L2_GRID)}
TASK_KEYS = {"name", "kind", "weight", "source", "holdout"}

FULL_SCALE = {
    "model": {"emb_dim": 512, "H_enc": 2048, "H_dec": 2048, "layers": 1, "head_hidden": [512], "head_dropout": 0.3},
    "train": {"batch": 48, "lr": 0.002, "nli_every": 10},
}

# generator name -> (task kind, default parameters)
GENERATORS = {
    "cipher": (C.SEQ2SEQ, {"vocab_size": 64, "n": 5000, "length_range": [3, 10], "reverse": False,
                           "tgt_prefix": "t", "seed_offset": 0}),
    "books": (C.SEQ2SEQ, {"vocab_size": 64, "n_books": 264, "sentences_per_book": 20, "branching": 2,
                          "length_range": [3, 10], "direction": "next", "seed_offset": 0}),
    "pcfg": (C.SEQ2SEQ, {"n": 5000, "max_depth": 12, "seed_offset": 0}),
    "nli": (C.PAIR, {"vocab_size": 64, "n": 5000, "length_range": [3, 10], "seed_offset": 0}),
}


def _synthetic(generator, **params):
    return {"synthetic": dict(generator=generator, **params)}


DEFAULT_TASKS = [
    {"name": "fr", "kind": C.SEQ2SEQ, "source": _synthetic("cipher", tgt_prefix="f", seed_offset=1)},
    {"name": "de", "kind": C.SEQ2SEQ, "source": _synthetic("cipher", tgt_prefix="g", reverse=True, seed_offset=2)},
    {"name": "stn", "kind": C.SEQ2SEQ, "source": _synthetic("books", direction="next", seed_offset=3)},
    {"name": "stp", "kind": C.SEQ2SEQ, "source": _synthetic("books", direction="previous", seed_offset=3)},
    {"name": "parse", "kind": C.SEQ2SEQ, "source": _synthetic("pcfg", seed_offset=4)},
    {"name": "nli", "kind": C.PAIR, "source": _synthetic("nli", seed_offset=5)},
]
DEFAULT_HOLDOUT = 500


def _section(raw, defaults, where):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(raw))
    return out


def _task(raw, i):
    where = f"tasks[{i}]"
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(raw) - TASK_KEYS)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    for key in ("name", "kind", "source"):
        if key not in raw:
            raise ConfigError(f"{where}: missing {key!r}")
    if raw["kind"] not in C.KINDS:
        raise ConfigError(f"{where}: kind must be one of {sorted(C.KINDS)}")
    task = {"name": str(raw["name"]), "kind": raw["kind"], "weight": raw.get("weight"),
            "holdout": int(raw.get("holdout", DEFAULT_HOLDOUT))}
    src = raw["source"]
    if not isinstance(src, dict) or len(src) != 1 or next(iter(src)) not in ("synthetic", "files"):
        raise ConfigError(f"{where}.source: expected {{'synthetic': ...}} or {{'files': ...}}")
    if "synthetic" in src:
        spec = dict(src["synthetic"])
        gen = spec.pop("generator", None)
        if gen not in GENERATORS:
            raise ConfigError(f"{where}.source.synthetic: generator must be one of {sorted(GENERATORS)}")
        kind, defaults = GENERATORS[gen]
        if kind != task["kind"]:
            raise ConfigError(f"{where}: generator {gen!r} produces {kind} tasks")
        params = _section(spec, defaults, f"{where}.source.synthetic")
        task["source"] = {"synthetic": dict(generator=gen, **params)}
    else:
        files = _section(src["files"], {"train": None, "test": None}, f"{where}.source.files")
        if not files["train"]:
            raise ConfigError(f"{where}.source.files: 'train' is required")
        task["source"] = {"files": files}
    return task


def resolve(raw):
    """Validate a config document and fill in defaults."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - {"model", "train", "tasks", "eval"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    cfg = {
        "model": _section(raw.get("model"), MODEL_DEFAULTS, "model"),
        "train": _section(raw.get("train"), TRAIN_DEFAULTS, "train"),
        "eval": _section(raw.get("eval"), EVAL_DEFAULTS, "eval"),
    }
    tasks = raw.get("tasks", DEFAULT_TASKS)
    if not isinstance(tasks, list) or not tasks:
        raise ConfigError("tasks: expected a non-empty list")
    cfg["tasks"] = [_task(t, i) for i, t in enumerate(tasks)]
    names = [t["name"] for t in cfg["tasks"]]
    if len(set(names)) != len(names):
        raise ConfigError("tasks: names must be unique")
    if cfg["eval"]["pooling"] not in ("last", "max", "auto"):
        raise ConfigError("eval.pooling must be last, max or auto")
    model_config(cfg)
    train_config(cfg)
    return cfg


def load(path):
    if path is None:
        return resolve({})
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return resolve(raw)


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def model_config(cfg):
    m = cfg["model"]
    if min(m["emb_dim"], m["H_enc"], m["H_dec"], m["layers"]) < 1:
        raise ConfigError("model sizes must be positive")
    if not 0.0 <= m["head_dropout"] < 1.0:
        raise ConfigError("model.head_dropout must be in [0, 1)")
    return ModelConfig(m["emb_dim"], m["H_enc"], m["H_dec"], m["layers"], list(m["head_hidden"]), m["head_dropout"])


def train_config(cfg):
    t = cfg["train"]
    if t["lr"] < 0 or t["clip"] <= 0:
        raise ConfigError("train.lr must be >= 0 and train.clip > 0")
    return TrainConfig(batch_size=t["batch"], lr=t["lr"], nli_every=t["nli_every"], total_updates=t["updates"],
                       grad_clip_norm=t["clip"], seed=t["seed"], checkpoint_every=t["checkpoint_every"])


def generate(task, seed):
    """Materialise a synthetic task as one full dataset."""
    p = dict(task["source"]["synthetic"])
    gen = p.pop("generator")
    s = seed * 1000 + p.pop("seed_offset")
    name = task["name"]
    if gen == "cipher":
        return C.gen_cipher_task(s, p["vocab_size"], p["n"], tuple(p["length_range"]), p["reverse"],
                                 name=name, tgt_prefix=p["tgt_prefix"])
    if gen == "books":
        if p["direction"] not in ("next", "previous"):
            raise ConfigError(f"task {name}: books direction must be next or previous")
        stn, stp = C.gen_books(s, p["n_books"], p["sentences_per_book"], p["vocab_size"], p["branching"],
                               tuple(p["length_range"]), names=(name, name))
        return stn if p["direction"] == "next" else stp
    if gen == "pcfg":
        return C.gen_pcfg_parsing(s, n=p["n"], max_depth=p["max_depth"], name=name)
    sampler = C.uniform_sentence_sampler(p["vocab_size"], tuple(p["length_range"]))
    return C.gen_nli(s, p["n"], sampler, C.antonym_table(C.word_tokens("w", p["vocab_size"])), name=name)


def load_task(task, seed):
    """Return ``(train, test)`` datasets for one configured task; ``test`` may be ``None``."""
    if "synthetic" in task["source"]:
        full = generate(task, seed)
        if not 0 <= task["holdout"] < len(full):
            raise ConfigError(f"task {task['name']}: holdout {task['holdout']} out of range")
        return full.split(len(full) - task["holdout"])
    files = task["source"]["files"]
    train = C.load_parallel_tsv(files["train"], task["name"], task["kind"])
    test = C.load_parallel_tsv(files["test"], task["name"], task["kind"]) if files["test"] else None
    return train, test


def task_specs(cfg):
    """``(specs, held_out)`` where ``held_out`` maps task name to its test split."""
    seed = cfg["train"]["seed"]
    specs, held = [], {}
    for t in cfg["tasks"]:
        train, test = load_task(t, seed)
        specs.append(TaskSpec(t["name"], t["kind"], train, t["weight"]))
        held[t["name"]] = test
    return specs, held
