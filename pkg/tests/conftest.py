import numpy as np
import pytest

from mtse import corpus as C
from mtse.model import ModelConfig, MultiTaskModel, TaskBinding
from mtse.numcore import Rng


def tiny_task_suite(seed=0, vocab_size=12):
    """Small instances of all six task families."""
    fr = C.gen_cipher_task(seed + 1, vocab_size=vocab_size, n=6, length_range=(2, 4), tgt_prefix="f", name="fr")
    de = C.gen_cipher_task(seed + 2, vocab_size=vocab_size, n=6, length_range=(2, 4), reverse=True,
                           tgt_prefix="g", name="de")
    stn, stp = C.gen_books(seed + 3, n_books=2, sentences_per_book=4, vocab_size=vocab_size, length_range=(2, 4))
    parse = C.gen_pcfg_parsing(seed + 4, n=4)
    nli = C.gen_nli(seed + 5, n=6, sampler=C.uniform_sentence_sampler(vocab_size, (2, 4)),
                    antonyms=C.antonym_table(C.word_tokens("w", vocab_size)))
    return [fr, de, stn, stp, parse, nli]


def tiny_model(datasets, config, seed=0, jitter=0.0):
    src = C.build_vocab(s for d in datasets for s in d.source_sentences())
    binds = []
    for d in datasets:
        if d.kind == C.SEQ2SEQ:
            binds.append(TaskBinding(d.name, d.kind, C.build_vocab(d.target_sentences())))
        else:
            binds.append(TaskBinding(d.name, d.kind))
    rng = Rng(seed)
    model = MultiTaskModel.create(config, src, binds, rng)
    if jitter:
        for v in model.params.values():
            v += rng.uniform(-jitter, jitter, v.shape)
    return model


def first_batches(model, datasets, n=2):
    out = {}
    for d in datasets:
        enc = C.encode_dataset(d, model.src_vocab, model.bindings[d.name].tgt_vocab)
        out[d.name] = C.make_batch(enc[:n])
    return out


@pytest.fixture
def suite():
    return tiny_task_suite()


@pytest.fixture
def small_config():
    return ModelConfig(emb_dim=5, H_enc=4, H_dec=3, layers=1, head_hidden=[6])


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(7)
