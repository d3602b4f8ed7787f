"""Compare the numba kernels against the numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--sizes 256 1024 4096]

Per-kernel timings use both implementations directly in one process. The
end-to-end row tracks one sequence in a subprocess per setting of
MEMTRACK_DISABLE_NUMBA, since the flag is read at import time.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from memtrack import kernels

TRACK_SNIPPET = """
import time
from memtrack import kernels
from memtrack.config import TrackerConfig
from memtrack.model import init_params
from memtrack.synth import generate_sequence, random_spec
from memtrack.tracker import track_sequence
cfg = TrackerConfig(n_points=512, d_model=32, k_tokens=8, knn_k=16, l_mu=1, l_mfr=1)
seq = generate_sequence(random_spec("car", 30, seed=1, distractors=1, ground_density=0.5))
p = init_params(cfg, 0)
track_sequence(seq, p, cfg)  # warm-up, includes jit compilation
t = time.perf_counter()
track_sequence(seq, p, cfg)
print(kernels.USE_NUMBA, (time.perf_counter() - t) / 29)
"""


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", type=int, nargs="+", default=[256, 1024, 4096])
    ap.add_argument("--k", type=int, default=16)
    args = ap.parse_args()
    if kernels.numba is None:
        sys.exit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<10}{'n':>7}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for n in args.sizes:
        xyz = rng.normal(size=(n, 3))
        dst = rng.normal(size=(n, 3))
        cases = {
            "fps": (lambda: kernels.fps_numpy(xyz, n // 2), lambda: kernels.fps_numba(xyz, n // 2)),
            "knn": (lambda: kernels.knn_numpy(xyz, args.k), lambda: kernels.knn_numba(xyz, args.k)),
            "nearest": (lambda: kernels.nearest_numpy(xyz, dst), lambda: kernels.nearest_numba(xyz, dst)),
        }
        for name, (ref, fast) in cases.items():
            fast()  # compile outside the timed region
            a, b = best_of(ref, args.repeat), best_of(fast, args.repeat)
            print(f"{name:<10}{n:>7}{1e3 * a:>12.2f}{1e3 * b:>12.2f}{a / b:>10.1f}")

    print("\nend-to-end tracking, ms/frame")
    for flag in ("1", "0"):
        env = dict(os.environ, MEMTRACK_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", TRACK_SNIPPET], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        label = "numba" if out[0] == "True" else "numpy"
        print(f"{label:<10}{1e3 * float(out[1]):>10.1f}")


if __name__ == "__main__":
    main()
