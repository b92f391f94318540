"""Compare the numba and numpy kernels (GRU recurrences, Adam, scatter-add).

    python benchmarks/bench_kernels.py            # kernel timings
    python benchmarks/bench_kernels.py --train    # also training updates/s per backend

Kernel timings call both implementations directly, so the backend flag
does not matter for them. ``--train`` runs a short training job in a
subprocess per backend with ``MTSE_DISABLE_JIT`` set accordingly.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from mtse import kernels as K

SHAPES = [(16, 10, 64), (48, 30, 128), (48, 30, 512)]

TRAIN_SNIPPET = """
import json, time
from mtse import corpus as C
from mtse._jit import backend_name
from mtse.model import ModelConfig
from mtse.trainer import TaskSpec, TrainConfig, Trainer
ds = C.gen_cipher_task(0, n=2000)
tr = Trainer(TrainConfig(total_updates=0), [TaskSpec("fr", C.SEQ2SEQ, ds)], model_config=ModelConfig())
tr.run(20)
t0 = time.perf_counter()
tr.run({n})
print(json.dumps({{"backend": backend_name(), "updates_per_s": {n} / (time.perf_counter() - t0)}}))
"""


def make_inputs(n, T, H, seed=0):
    rng = np.random.default_rng(seed)
    G = rng.normal(scale=0.5, size=(n, T, 3 * H))
    U = rng.uniform(-1 / np.sqrt(H), 1 / np.sqrt(H), size=(H, 3 * H))
    h0 = np.zeros((n, H))
    lengths = rng.integers(max(1, T // 3), T + 1, size=n).astype(np.int64)
    lengths[0] = T
    return G, U, h0, lengths


def best_ms(fn, repeat):
    return 1e3 * min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_shape(n, T, H, repeat):
    G, U, h0, lengths = make_inputs(n, T, H)
    row = {"n": n, "T": T, "H": H}
    outs = {}
    for name, fwd, bwd in (("numpy", K.gru_forward_numpy, K.gru_backward_numpy),
                           ("numba", K.gru_forward_numba, K.gru_backward_numba)):
        res = fwd(G, U, h0, lengths, False)
        Hs, R, Z, Cc, P, _ = res
        dHs = np.ones_like(Hs)
        dhf = np.zeros((n, H))
        bwd(dHs, dhf, U, R, Z, Cc, P, lengths, False)  # compile / warm up
        row[f"{name}_fwd_ms"] = best_ms(lambda: fwd(G, U, h0, lengths, False), repeat)
        row[f"{name}_bwd_ms"] = best_ms(lambda: bwd(dHs, dhf, U, R, Z, Cc, P, lengths, False), repeat)
        outs[name] = (Hs, bwd(dHs, dhf, U, R, Z, Cc, P, lengths, False)[1])
    row["max_abs_diff"] = float(max(np.max(np.abs(a - b)) for a, b in zip(outs["numpy"], outs["numba"])))
    row["fwd_speedup"] = row["numpy_fwd_ms"] / row["numba_fwd_ms"]
    row["bwd_speedup"] = row["numpy_bwd_ms"] / row["numba_bwd_ms"]
    return row


def bench_elementwise(repeat):
    """Fused Adam update and embedding scatter-add, both backends."""
    rng = np.random.default_rng(1)
    rows = []
    n = 1_000_000
    g = rng.normal(size=n)
    for name, fn in (("numpy", K.adam_update_numpy), ("numba", K.adam_update_numba)):
        p, m, v = np.zeros(n), np.zeros(n), np.zeros(n)
        fn(p, g, m, v, 0.002, 0.9, 0.999, 1e-8, 0.1, 0.001)
        rows.append(("adam 1M", name, best_ms(lambda: fn(p, g, m, v, 0.002, 0.9, 0.999, 1e-8, 0.1, 0.001), repeat)))
    idx = rng.integers(0, 2000, size=48 * 30)
    upd = rng.normal(size=(idx.size, 256))
    for name, fn in (("numpy", K.scatter_add_rows_numpy), ("numba", K.scatter_add_rows_numba)):
        out = np.zeros((2000, 256))
        fn(out, idx, upd)
        rows.append(("scatter 1440x256", name, best_ms(lambda: fn(out, idx, upd), repeat)))
    return rows


def bench_training(n_updates):
    rows = []
    for flag in ("1", "0"):
        env = dict(os.environ, MTSE_DISABLE_JIT=flag)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET.format(n=n_updates)], env=env,
                             capture_output=True, text=True, check=True)
        rows.append(json.loads(out.stdout.strip().splitlines()[-1]))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--train", action="store_true", help="also time training updates per backend")
    ap.add_argument("--updates", type=int, default=200)
    args = ap.parse_args()
    print(f"{'n':>4} {'T':>4} {'H':>5} | {'numpy fwd':>10} {'numba fwd':>10} {'x':>6} | "
          f"{'numpy bwd':>10} {'numba bwd':>10} {'x':>6} | max|diff|")
    for n, T, H in SHAPES:
        r = bench_shape(n, T, H, args.repeat)
        print(f"{n:>4} {T:>4} {H:>5} | {r['numpy_fwd_ms']:>8.3f}ms {r['numba_fwd_ms']:>8.3f}ms {r['fwd_speedup']:>5.1f}x | "
              f"{r['numpy_bwd_ms']:>8.3f}ms {r['numba_bwd_ms']:>8.3f}ms {r['bwd_speedup']:>5.1f}x | {r['max_abs_diff']:.1e}")
    for label, name, ms in bench_elementwise(args.repeat):
        print(f"{label:>18} {name}: {ms:8.3f}ms")
    if args.train:
        for r in bench_training(args.updates):
            print(f"training ({r['backend']}): {r['updates_per_s']:.1f} updates/s")


if __name__ == "__main__":
    main()
