"""Compare the numba kernels with their numpy fallbacks.

Run with ``python3 benchmarks/bench_kernels.py``.  Kernel timings use both
namespaces in one process; the training-epoch timing runs a subprocess per
backend so ``VITAL_DISABLE_NUMBA`` takes effect at import time.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from vital import kernels


def kernel_cases(rng):
    x = rng.standard_normal((64, 17, 64))
    g, b = rng.standard_normal(64), rng.standard_normal(64)
    _, xhat, rstd = kernels.numpy_kernels.layernorm(x, g, b, 1e-5)
    scores = rng.standard_normal((64, 5, 17, 17))
    probs = kernels.numpy_kernels.softmax(scores)
    img = rng.random((64, 64, 64, 3))
    u = rng.random((64, 64, 64))
    noise = rng.standard_normal((int(np.count_nonzero(u[:, 1:, :56] < 0.1)), 3))
    a, c = rng.standard_normal((500, 64)), rng.standard_normal((2000, 64))
    return {
        "gelu": lambda k: k.gelu(x),
        "layernorm": lambda k: k.layernorm(x, g, b, 1e-5),
        "layernorm_grad": lambda k: k.layernorm_grad(x, xhat, rstd, g),
        "softmax": lambda k: k.softmax(scores),
        "softmax_grad": lambda k: k.softmax_grad(probs, scores),
        "dropout_infill": lambda k: k.dropout_infill(img, u, noise, 0.1, 0.5, 0.1, 56),
        "pairwise_sqdist": lambda k: k.pairwise_sqdist(a, c),
    }


def best_of(fn, repeat):
    fn()  # warm-up, includes JIT compilation for numba
    return min(timeit.repeat(fn, number=1, repeat=repeat))


EPOCH_SNIPPET = """
import json, time
from dataclasses import replace
from vital import kernels, presets, synthgen, training
gen = synthgen.GenConfig.desk(0)
gen = replace(gen, buildings=gen.buildings[:1])
data = synthgen.generate(gen).where(devices=[p.device_id for p in gen.base_profiles])
vit = presets.desk_vit_config()
cfg = presets.desk_train_config(epochs=1)
training.train_model(data, vit, cfg)
t = time.perf_counter()
training.train_model(data, vit, cfg)
print(json.dumps({"backend": kernels.backend_name(), "epoch_s": time.perf_counter() - t}))
"""


def epoch_time(disable: bool) -> dict:
    env = dict(os.environ, VITAL_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, check=True,
                         capture_output=True, text=True).stdout
    return json.loads(out.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--skip-epoch", action="store_true", help="only time the kernels")
    args = ap.parse_args(argv)
    if not kernels.HAS_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in kernel_cases(rng).items():
        t_np = best_of(lambda: fn(kernels.numpy_kernels), args.repeat)
        t_nb = best_of(lambda: fn(kernels.numba_kernels), args.repeat)
        print(f"{name:<16}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.2f}x")

    if not args.skip_epoch:
        print("\none training epoch, desk preset, one building")
        runs = [epoch_time(False), epoch_time(True)]
        for r in runs:
            print(f"  {r['backend']:<6} {r['epoch_s']:.2f} s")
        print(f"  speedup {runs[1]['epoch_s'] / runs[0]['epoch_s']:.2f}x")


if __name__ == "__main__":
    main()
