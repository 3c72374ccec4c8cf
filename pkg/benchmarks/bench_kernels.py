"""Compare the compiled kernels with the numpy fallback.

Run from the repository root after building the extension::

    python setup.py build_ext --inplace
    python benchmarks/bench_kernels.py [--repeat 200]

Prints per-kernel median wall time for both backends, the speed-up, and the
maximum absolute difference between their outputs.  A short end-to-end
training run is timed under each backend as well.
"""

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from neuraldemand.nn import _kernels_py

try:
    from neuraldemand.nn import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def _cases(rng, batch, hidden, goods):
    z = rng.normal(size=(batch, hidden))
    g = rng.normal(size=(batch, hidden))
    logits = rng.normal(size=(batch, goods))
    p = rng.normal(size=(hidden, hidden))
    grad = rng.normal(size=(hidden, hidden))

    def adam(mod):
        pp, m, v = p.copy(), np.zeros_like(p), np.zeros_like(p)
        return lambda: mod.adam_update(pp, grad, m, v, 5e-4, 0.9, 0.999, 1e-8, 1e-5, 1)

    return {
        "silu_forward": (lambda mod: (lambda: mod.silu_forward(z)), lambda mod: mod.silu_forward(z)[0]),
        "silu_backward": (
            lambda mod: (lambda: mod.silu_backward(g, z, 1.0 / (1.0 + np.exp(-z)))),
            lambda mod: mod.silu_backward(g, z, 1.0 / (1.0 + np.exp(-z))),
        ),
        "softmax_rows": (lambda mod: (lambda: mod.softmax_rows(logits)), lambda mod: mod.softmax_rows(logits)),
        "adam_update": (adam, lambda mod: _adam_once(mod, p, grad)),
    }


def _adam_once(mod, p, grad):
    pp, m, v = p.copy(), np.zeros_like(p), np.zeros_like(p)
    mod.adam_update(pp, grad, m, v, 5e-4, 0.9, 0.999, 1e-8, 1e-5, 1)
    return pp


TRAIN_SNIPPET = """
import time
from neuraldemand.dgp import CES, SimConfig, generate_dataset
from neuraldemand.neural import TrainConfig, Variant, fit_neural
from neuraldemand.nn.kernels import BACKEND, tune_allocator
tune_allocator()
d = generate_dataset(CES(), SimConfig(N=800, seed=0))
t = time.perf_counter()
fit_neural(d, Variant(), TrainConfig(epochs={epochs}, hidden=64, slutsky_start=10), seed=0)
print(BACKEND, time.perf_counter() - t)
"""


def _train_time(pure: bool, epochs: int) -> str:
    env = dict(os.environ, NEURALDEMAND_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET.format(epochs=epochs)], env=env, capture_output=True, text=True, check=True)
    backend, secs = out.stdout.split()
    return f"{backend:7s} {float(secs):7.2f} s"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--hidden", type=int, default=256)
    ap.add_argument("--train-epochs", type=int, default=50, help="0 skips the training comparison")
    args = ap.parse_args(argv)
    if _kernels_c is None:
        print("compiled kernels not built; run `python setup.py build_ext --inplace` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':15s} {'numpy (us)':>11s} {'cython (us)':>12s} {'speed-up':>9s} {'max |diff|':>11s}")
    for name, (make, value) in _cases(rng, args.batch, args.hidden, 3).items():
        tp = _median_time(make(_kernels_py), args.repeat)
        tc = _median_time(make(_kernels_c), args.repeat)
        diff = float(np.max(np.abs(np.asarray(value(_kernels_py)) - np.asarray(value(_kernels_c)))))
        print(f"{name:15s} {tp * 1e6:11.1f} {tc * 1e6:12.1f} {tp / tc:8.2f}x {diff:11.2e}")
    if args.train_epochs:
        print(f"\nend-to-end training, {args.train_epochs} epochs, H=64, N=800:")
        print("  " + _train_time(True, args.train_epochs))
        print("  " + _train_time(False, args.train_epochs))
    return 0


if __name__ == "__main__":
    sys.exit(main())
