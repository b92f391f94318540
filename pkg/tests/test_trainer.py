import math

import numpy as np
import pytest

from mtse import corpus as C
from mtse.errors import ConfigError, FormatError, NumericError
from mtse.model import ModelConfig
from mtse.numcore import Rng, global_norm
from mtse.trainer import (TaskSpec, TrainConfig, Trainer, grad_check_model, is_pair_update, read_checkpoint,
                          sample_task, train, write_loss_log)

from conftest import first_batches, tiny_model, tiny_task_suite

SMALL = ModelConfig(emb_dim=6, H_enc=5, H_dec=5, head_hidden=[6])


def specs_of(datasets):
    return [TaskSpec(d.name, d.kind, d) for d in datasets]


def test_sample_task_one_hot():
    rng = Rng(0)
    assert all(sample_task([0, 0, 0, 1.0, 0], rng) == 3 for _ in range(500))


def test_sample_task_uniform_frequencies():
    rng = Rng(1)
    counts = np.bincount([sample_task([0.2] * 5, rng) for _ in range(100_000)], minlength=5)
    assert np.all(np.abs(counts / 1e5 - 0.2) <= 0.01)


def test_sample_task_binomial_ratio():
    rng = Rng(2)
    n = 20_000
    k = sum(sample_task([0.9, 0.1], rng) == 1 for _ in range(n))
    assert abs(k - 0.1 * n) <= 3 * math.sqrt(n * 0.1 * 0.9)


@pytest.mark.parametrize("alpha", [[0.5, 0.4], [1.2, -0.2], [], [0.5, 0.5 + 1e-8]])
def test_sample_task_rejects_bad_alpha(alpha):
    with pytest.raises(ConfigError):
        sample_task(alpha, Rng(0))


def test_pair_update_positions():
    marks = [u for u in range(1, 45) if is_pair_update(u, 10)]
    assert marks == [11, 22, 33, 44]


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(nli_every=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_schedule_pattern_in_log():
    tr = Trainer(TrainConfig(batch_size=2, nli_every=3, total_updates=17, seed=4), specs_of(tiny_task_suite()),
                 model_config=SMALL)
    tr.run()
    kinds = "".join("N" if name == "nli" else "S" for _, name, _ in tr.log)
    assert kinds == "SSSNSSSNSSSNSSSNS"
    assert [u for u, _, _ in tr.log] == list(range(1, 18))
    assert tr.adam.t == tr.update == 17


def test_single_task_loss_decreases():
    ds = C.gen_cipher_task(0, vocab_size=12, n=200, length_range=(2, 4))
    tr = Trainer(TrainConfig(batch_size=8, lr=0.01, total_updates=0, seed=1), [TaskSpec("c", C.SEQ2SEQ, ds)],
                 model_config=SMALL)
    probe = C.make_batch(tr.encoded["c"][:16])
    before = tr.model.loss("c", probe, with_grad=False)
    tr.run(50)
    assert [name for _, name, _ in tr.log] == ["c"] * 50
    assert tr.model.loss("c", probe, with_grad=False) < before


def test_zero_learning_rate_keeps_parameters():
    tr = Trainer(TrainConfig(batch_size=2, lr=0.0, total_updates=12), specs_of(tiny_task_suite()), model_config=SMALL)
    before = {k: v.copy() for k, v in tr.model.params.items()}
    tr.run()
    assert all(np.array_equal(before[k], v) for k, v in tr.model.params.items())


def test_clipping_bounds_update_gradient(monkeypatch):
    seen = []
    import mtse.trainer as T

    real = T.adam_step

    def spy(params, grads, *a, **k):
        seen.append(global_norm(grads))
        return real(params, grads, *a, **k)

    monkeypatch.setattr(T, "adam_step", spy)
    tr = Trainer(TrainConfig(batch_size=2, total_updates=5, grad_clip_norm=1e-3), specs_of(tiny_task_suite()),
                 model_config=SMALL)
    tr.run()
    assert len(seen) == 5 and max(seen) <= 1e-3 + 1e-12


def test_nonfinite_loss_aborts_with_record(tmp_path):
    tr = Trainer(TrainConfig(batch_size=2, total_updates=10, checkpoint_every=2), specs_of(tiny_task_suite()),
                 model_config=SMALL)
    ckpt = tmp_path / "c.ckpt"
    tr.run(4, checkpoint_path=str(ckpt))
    saved = ckpt.read_bytes()
    for k in tr.model.params:
        if k.startswith("dec."):
            tr.model.params[k][...] = np.nan
    with pytest.raises(NumericError):
        tr.run(checkpoint_path=str(ckpt))
    assert not math.isfinite(tr.log[-1][2])
    assert ckpt.read_bytes() == saved


def test_checkpoint_round_trip_and_resume(tmp_path):
    datasets = tiny_task_suite()
    cfg = TrainConfig(batch_size=3, nli_every=2, total_updates=14, seed=9)
    full = Trainer(cfg, specs_of(datasets), model_config=SMALL)
    full.run()

    part = Trainer(cfg, specs_of(datasets), model_config=SMALL)
    part.run(6)
    path = tmp_path / "k.ckpt"
    part.save(str(path))
    header, records = read_checkpoint(str(path))
    for k, v in part.model.params.items():
        assert np.array_equal(records[f"param/{k}"], v)
    resumed = Trainer.resume(str(path), specs_of(datasets))
    resumed.log = list(part.log)
    resumed.run()
    assert resumed.log == full.log
    for k, v in full.model.params.items():
        assert np.array_equal(resumed.model.params[k], v)


def test_identical_seeds_give_identical_files(tmp_path):
    outs = []
    for run in range(2):
        ck, lg = tmp_path / f"{run}.ckpt", tmp_path / f"{run}.tsv"
        train(TrainConfig(batch_size=2, total_updates=8, seed=3), specs_of(tiny_task_suite()), model_config=SMALL,
              log_path=str(lg), checkpoint_path=str(ck))
        outs.append((ck.read_bytes(), lg.read_bytes()))
    assert outs[0] == outs[1]


def test_checkpoint_guards(tmp_path):
    tr = Trainer(TrainConfig(batch_size=2, total_updates=1), specs_of(tiny_task_suite()), model_config=SMALL)
    path = tmp_path / "x.ckpt"
    tr.save(str(path))
    data = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="magic"):
        read_checkpoint(str(tmp_path / "magic.ckpt"))
    (tmp_path / "ver.ckpt").write_bytes(data[:4] + (7).to_bytes(4, "little") + data[8:])
    with pytest.raises(FormatError, match="version 7 found, expected 1"):
        read_checkpoint(str(tmp_path / "ver.ckpt"))
    (tmp_path / "cut.ckpt").write_bytes(data[: len(data) - 13])
    with pytest.raises(FormatError, match="truncated"):
        read_checkpoint(str(tmp_path / "cut.ckpt"))


def test_loss_log_format(tmp_path):
    path = tmp_path / "l.tsv"
    write_loss_log(str(path), [(1, "fr", 0.1), (2, "nli", 1.5)])
    assert path.read_text() == "update\ttask\tloss\n1\tfr\t0.1\n2\tnli\t1.5\n"


@pytest.fixture(scope="module")
def checked():
    datasets = tiny_task_suite()
    model = tiny_model(datasets, ModelConfig(emb_dim=4, H_enc=3, H_dec=3, head_hidden=[4]), jitter=0.2)
    return model, first_batches(model, datasets)


def test_grad_check_passes_on_all_tasks(checked):
    model, batches = checked
    res = grad_check_model(model, batches)
    assert res["passed"], res["failed"]
    assert set(res["errors"]) == set(model.params)


def test_grad_check_flags_exactly_the_corrupted_tensor(checked):
    model, batches = checked
    target = "dec.fr.U_z"

    def flip(grads):
        grads[target] = grads[target].copy()
        grads[target].flat[0] *= -1.0
        grads[target].flat[0] += 1.0
        return grads

    res = grad_check_model(model, batches, analytic_hook=flip)
    assert res["failed"] == [target]


def test_grad_check_eps_sweep(checked):
    model, batches = checked
    worst = [grad_check_model(model, batches, eps=e)["worst"] for e in (1e-4, 1e-5, 1e-6)]
    decades = [math.floor(math.log10(w)) for w in worst]
    assert max(worst) < 1e-4
    assert max(decades) - min(decades) <= 1
