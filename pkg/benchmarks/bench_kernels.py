"""Time the numba kernels against their numpy fallbacks.

Each backend runs in its own subprocess because the switch
(``REFDET_DISABLE_NUMBA``) is read at import time. Usage::

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

WORKER = r"""
import json, sys, timeit
import numpy as np
from refdet import kernels
from refdet._accel import backend

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
def boxes(n):
    xy = rng.uniform(0, 100, (n, 2))
    return np.hstack([xy, xy + rng.uniform(1, 30, (n, 2))])
a, b = boxes(300), boxes(300)
cost = rng.normal(size=(60, 100))
feats = rng.uniform(size=(256, 64))
iou = np.sort(rng.uniform(size=(100, 20)), axis=0)[::-1].copy()
thr = np.round(np.arange(0.5, 0.951, 0.05), 2)
cases = {
    "iou_giou 300x300": lambda: kernels.pairwise_iou_giou(a, b),
    "lsap 60x100": lambda: kernels.lsap_min(cost),
    "affinity 256 patches": lambda: kernels.threshold_affinity(feats, 0.15),
    "greedy_match 100x20": lambda: kernels.greedy_match(iou, thr),
}
out = {}
for name, fn in cases.items():
    fn()  # compile / warm up
    out[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
print(json.dumps({"backend": backend(), "times": out}))
"""


def run(disable, repeat):
    env = dict(os.environ, REFDET_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True,
                         text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    fast, slow = run(False, args.repeat), run(True, args.repeat)
    print(f"{'kernel':<24}{fast['backend']:>12}{slow['backend']:>12}{'speedup':>10}")
    for name in fast["times"]:
        f, s = fast["times"][name], slow["times"][name]
        print(f"{name:<24}{f * 1e3:>10.3f}ms{s * 1e3:>10.3f}ms{s / f:>9.1f}x")


if __name__ == "__main__":
    main()
