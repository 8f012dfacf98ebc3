"""Time the numba kernels against their numpy fallbacks.

Kernel timings call both implementations in one process. The model timing
runs a few training steps in child processes with LATTE_NUMBA=1 and
LATTE_NUMBA=0, since the backend is fixed at import time.

    python benchmarks/bench_kernels.py [--repeats N] [--skip-model]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from latte import _kernels as kern

STEP_SCRIPT = """
import time
import numpy as np
from latte.data import SynthSpec, synth_generate
from latte.model import LatteConfig, LatteModel
from latte.training import TrainConfig, build_optimizer, cross_entropy_loss
from latte import autograd as ag

cfg = LatteConfig(channels=8, timesteps=128, classes=2, components=8, bottleneck=8,
                  filters=8, heads=2, latent_dim=16)
ds = synth_generate(SynthSpec(trials=32, seed=0))
model = LatteModel(cfg, [0, 1, 2], seed=0).train(True)
opt = build_optimizer(model, TrainConfig())
x, y, s = ds.x[:32], ds.y[:32], ds.subject[:32]

def step():
    opt.zero_grad()
    loss = cross_entropy_loss(model(x, s), y)
    ag.backward(loss)
    opt.step()

step()  # warm-up, includes jit compilation
t0 = time.perf_counter()
for _ in range({steps}):
    step()
print((time.perf_counter() - t0) / {steps})
"""


def kernel_cases(rng):
    gcols = rng.standard_normal((32, 120, 16, 9))
    gcols2 = rng.standard_normal((32, 8, 120, 8, 8, 9))
    scores = rng.standard_normal((512, 128))
    grad = rng.standard_normal((256, 42, 17))
    index = rng.integers(0, 128, (256, 42))
    return {
        "fold1d": (kern.fold1d_numpy, getattr(kern, "fold1d_numba", None), (gcols, 136, 2)),
        "fold2d": (kern.fold2d_numpy, getattr(kern, "fold2d_numba", None), (gcols2, 15, 128)),
        "window_argmax": (kern.window_argmax_numpy, getattr(kern, "window_argmax_numba", None), (scores, 3, 3, 1, 1)),
        "gather_rows_backward": (
            kern.gather_rows_backward_numpy,
            getattr(kern, "gather_rows_backward_numba", None),
            (grad, index, 128),
        ),
    }


def best_of(fn, args, repeats):
    timer = timeit.Timer(lambda: fn(*args))
    number = max(1, int(0.05 / max(timer.timeit(1), 1e-7)))
    return min(timer.repeat(repeats, number)) / number


def bench_kernels(repeats):
    print(f"{'kernel':<22}{'numpy ms':>11}{'numba ms':>11}{'speedup':>9}")
    for name, (np_fn, nb_fn, args) in kernel_cases(np.random.default_rng(0)).items():
        t_np = best_of(np_fn, args, repeats)
        if nb_fn is None:
            print(f"{name:<22}{t_np * 1e3:>11.3f}{'n/a':>11}")
            continue
        np.testing.assert_allclose(nb_fn(*args), np_fn(*args), rtol=1e-12, atol=1e-12)
        t_nb = best_of(nb_fn, args, repeats)
        print(f"{name:<22}{t_np * 1e3:>11.3f}{t_nb * 1e3:>11.3f}{t_np / t_nb:>8.1f}x")


def bench_model(steps):
    times = {}
    for flag in ("1", "0"):
        env = dict(os.environ, LATTE_NUMBA=flag)
        out = subprocess.run(
            [sys.executable, "-c", STEP_SCRIPT.format(steps=steps)], env=env, capture_output=True, text=True, check=True
        )
        times[flag] = float(out.stdout.strip().splitlines()[-1])
    print(f"\ntraining step (batch 32): numba {times['1'] * 1e3:.1f} ms, numpy {times['0'] * 1e3:.1f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--skip-model", action="store_true")
    args = ap.parse_args()
    if not kern.HAVE_NUMBA:
        print("numba is not importable; only numpy timings are shown")
    bench_kernels(args.repeats)
    if not args.skip_model:
        bench_model(args.steps)


if __name__ == "__main__":
    main()
