"""The one-to-many multi-task model: shared encoder, per-task decoders and heads."""
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import PAIR, SEQ2SEQ, Vocabulary
from .decoder import decoder_loss, greedy_decode, init_decoder
from .encoder import SentenceBatch, encoder_backward, encoder_forward, init_encoder, pool
from .errors import ConfigError, InputError
from .nli_head import init_mlp, mlp_input_shapes, nli_loss, nli_predict, dropout_masks


@dataclass
class ModelConfig:
    emb_dim: int = 32
    H_enc: int = 64
    H_dec: int = 64
    layers: int = 1
    head_hidden: list = field(default_factory=lambda: [64])
    head_dropout: float = 0.3

    @property
    def rep_dim(self):
        return 2 * self.H_enc


@dataclass
class TaskBinding:
    """How a task attaches to the shared encoder."""

    name: str
    kind: str
    tgt_vocab: Vocabulary = None
    n_classes: int = 3

    @property
    def prefix(self):
        return f"dec.{self.name}" if self.kind == SEQ2SEQ else f"head.{self.name}"


class MultiTaskModel:
    def __init__(self, config, src_vocab, bindings, params):
        self.config = config
        self.src_vocab = src_vocab
        self.bindings = {b.name: b for b in bindings}
        self.params = params

    @classmethod
    def create(cls, config, src_vocab, bindings, rng):
        if config.layers < 1:
            raise ConfigError("encoder needs at least one layer")
        params = init_encoder(rng, len(src_vocab), config.emb_dim, config.H_enc, config.layers)
        for b in bindings:
            if b.kind == SEQ2SEQ:
                params.update(init_decoder(rng, len(b.tgt_vocab), config.emb_dim, config.H_dec, config.rep_dim, b.prefix))
            elif b.kind == PAIR:
                sizes = [4 * config.rep_dim] + list(config.head_hidden) + [b.n_classes]
                params.update(init_mlp(rng, sizes, b.prefix))
            else:
                raise ConfigError(f"unknown task kind {b.kind!r}")
        return cls(config, src_vocab, bindings, params)

    # -- losses ---------------------------------------------------------

    def head_rates(self, name):
        b = self.bindings[name]
        n_layers = len(self.config.head_hidden) + 1
        return [self.config.head_dropout] + [0.0] * (n_layers - 1) if b.kind == PAIR else None

    def draw_masks(self, name, batch, rng):
        """Dropout masks for one pair-task minibatch (``None`` for seq2seq)."""
        if self.bindings[name].kind != PAIR:
            return None
        shapes = mlp_input_shapes(self.params, self.bindings[name].prefix, batch[0].size)
        return dropout_masks(rng, shapes, self.head_rates(name))

    def loss(self, name, batch, with_grad=True, masks=None):
        """Loss (and gradients) of task ``name`` on one minibatch.

        ``masks`` switches the pair head into training mode with the given
        dropout masks; without it the head runs in evaluation mode.
        """
        b = self.bindings[name]
        p = self.params
        if b.kind == SEQ2SEQ:
            src, tgt = batch
            out, cache = encoder_forward(p, src)
            if not with_grad:
                return decoder_loss(p, b.prefix, out["h_x"], tgt, with_grad=False)
            loss, grads, dh_x = decoder_loss(p, b.prefix, out["h_x"], tgt)
            grads.update(encoder_backward(p, cache, dh_x))
            return loss, grads
        prem, hyp, labels = batch
        return nli_loss(p, prem, hyp, labels, self.head_rates(name), masks is not None, None, masks,
                        head_prefix=b.prefix, with_grad=with_grad)

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- inference ------------------------------------------------------

    def _batches(self, sentences, batch_size):
        ids = [self.src_vocab.encode(s) if s and isinstance(s[0], str) else list(s) for s in sentences]
        for i, s in enumerate(ids):
            if not s:
                raise InputError(f"empty sentence at row {i}")
        for i in range(0, len(ids), batch_size):
            yield SentenceBatch.from_sequences(ids[i:i + batch_size])

    def encode(self, sentences, pooling="last", batch_size=32):
        """Frozen sentence vectors, ``n x 2H``; tokens not in the vocabulary map to ``<unk>``."""
        chunks = []
        for batch in self._batches(sentences, batch_size):
            out, _ = encoder_forward(self.params, batch)
            if pooling == "last":
                chunks.append(out["h_x"])
            else:
                states = np.concatenate([out["H_fwd"], out["H_bwd"]], axis=2)
                chunks.append(pool(states, batch.lengths, pooling))
        if not chunks:
            return np.zeros((0, self.config.rep_dim))
        return np.concatenate(chunks, axis=0)

    def decode(self, name, sentences, max_len=None, batch_size=64):
        b = self.bindings[name]
        outs = []
        for batch in self._batches(sentences, batch_size):
            out, _ = encoder_forward(self.params, batch)
            limit = max_len or 3 * int(batch.ids.shape[1]) + 10
            outs.extend(greedy_decode(out["h_x"], self.params, b.prefix, limit))
        return [b.tgt_vocab.decode(o) for o in outs]

    def predict_pairs(self, name, premises, hypotheses, batch_size=64):
        b = self.bindings[name]
        preds = []
        pb = list(self._batches(premises, batch_size))
        hb = list(self._batches(hypotheses, batch_size))
        for p, h in zip(pb, hb):
            preds.append(nli_predict(self.params, p, h, head_prefix=b.prefix))
        return np.concatenate(preds)

    # -- serialisation metadata ------------------------------------------

    def meta(self):
        return {
            "model": asdict(self.config),
            "src_vocab": self.src_vocab.tokens,
            "tasks": [
                {"name": b.name, "kind": b.kind, "n_classes": b.n_classes,
                 "tgt_vocab": None if b.tgt_vocab is None else b.tgt_vocab.tokens}
                for b in self.bindings.values()
            ],
        }

    @classmethod
    def from_meta(cls, meta, params):
        config = ModelConfig(**meta["model"])
        bindings = [TaskBinding(t["name"], t["kind"], None if t["tgt_vocab"] is None else Vocabulary(t["tgt_vocab"]), t["n_classes"])
                    for t in meta["tasks"]]
        return cls(config, Vocabulary(meta["src_vocab"]), bindings, params)
