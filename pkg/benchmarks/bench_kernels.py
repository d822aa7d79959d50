"""Compare the compiled and numpy matmul backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints best-of-N wall time per shape, the speedup, and whether the two
outputs are bit-identical.  Finishes with one training epoch per backend.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from ldr_lab.kernels import available_backends

SHAPES = [
    # (m, k, n): Gram of a batch, layer forward, layer weight gradient
    ("gram bs=128 K=10", 10, 128, 10),
    ("fc 128x784 @ 784x1024", 128, 784, 1024),
    ("fc 128x1024 @ 1024x512", 128, 1024, 512),
    ("grad 1024x128 @ 128x512", 1024, 128, 512),
]

EPOCH_SNIPPET = """
import time
from ldr_lab import kernels
from ldr_lab.harness import RunConfig, train
cfg = RunConfig.from_dict({
    "dataset": {"name": "blobs", "num_classes": 10, "samples_per_class": 400,
                "means": [[i, (i * 7) %% 10] for i in range(10)]},
    "model": {"hidden_sizes": [256, 128]},
    "optim": {"epochs": 1},
    "output_dir": %r,
})
t0 = time.perf_counter()
train(cfg)
print(kernels.BACKEND, time.perf_counter() - t0)
"""


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--out", default="runs/bench")
    args = ap.parse_args()

    backends = available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'shape':28s} {'python':>10s} {'compiled':>10s} {'speedup':>8s}  identical")
    for name, m, k, n in SHAPES:
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        t_py, r_py = best_of(lambda: backends["python"].matmul(a, b), args.repeat)
        if "compiled" in backends:
            t_c, r_c = best_of(lambda: backends["compiled"].matmul(a, b), args.repeat)
            same = np.array_equal(r_py, r_c)
            print(f"{name:28s} {t_py * 1e3:9.2f}ms {t_c * 1e3:9.2f}ms {t_py / t_c:7.1f}x  {same}")
        else:
            print(f"{name:28s} {t_py * 1e3:9.2f}ms {'-':>10s}")

    print("\none training epoch (10-class blobs, 4000 samples, MLP 256-128):")
    for pure in ("0", "1"):
        env = {**os.environ, "LDR_LAB_PURE": pure}
        out = os.path.join(args.out, f"pure{pure}")
        res = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET % out], env=env,
                             capture_output=True, text=True, check=True)
        backend, secs = res.stdout.split()
        print(f"  {backend:9s} {float(secs):.2f}s")


if __name__ == "__main__":
    main()
