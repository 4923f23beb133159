"""Time the compiled conv core against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Kernel rows call both backends in-process. The encoder row runs a fresh
interpreter per backend, because the backend is chosen at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from corrverify import _backend

# (cin, cout, h, w, batch, k, stride): reducer on a toy map, then the slice
# shapes a center-pivot layer sees on toy volumes
CASES = [
    (32, 32, 8, 8, 1, 3, 1),
    (9, 8, 8, 8, 64, 3, 1),
    (8, 16, 8, 8, 64, 3, 2),
    (32, 32, 4, 4, 256, 3, 1),
]

ENCODER = """
import time, numpy as np
from corrverify import _backend
from corrverify.encoder4d import encoder_forward, init_weights
from corrverify.training import toy_encoder_config
w = init_weights(toy_encoder_config(), np.random.default_rng(0), np.float32)
v = np.random.default_rng(1).random((9, 8, 8, 8, 8)).astype(np.float32)
encoder_forward(v, w)
t = time.perf_counter()
for _ in range({n}):
    encoder_forward(v, w)
print(_backend.NAME, (time.perf_counter() - t) / {n})
"""


def time_call(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat):
    names = _backend.available()
    rng = np.random.default_rng(0)
    print(f"{'case':<28}{'op':<10}" + "".join(f"{n:>12}" for n in names) + f"{'py/comp':>10}")
    for cin, cout, h, w, b, k, s in CASES:
        x = rng.standard_normal((cin, h, w, b)).astype(np.float32)
        wt = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
        pad = k // 2
        gy = rng.standard_normal(_backend.get("python").conv2d_forward(x, wt, s, pad).shape).astype(np.float32)
        ops = {
            "forward": lambda m: m.conv2d_forward(x, wt, s, pad),
            "grad_x": lambda m: m.conv2d_backward_input(gy, wt, h, w, s, pad),
            "grad_w": lambda m: m.conv2d_backward_weight(x, gy, k, k, s, pad),
        }
        label = f"{cin}->{cout} {h}x{w} b{b} s{s}"
        for op, call in ops.items():
            secs = [time_call(lambda m=_backend.get(n): call(m), repeat) for n in names]
            ratio = f"{secs[-1] / secs[0]:>9.2f}x" if len(secs) > 1 else ""
            print(f"{label:<28}{op:<10}" + "".join(f"{t * 1e3:>10.3f}ms" for t in secs) + ratio)


def bench_encoder(n):
    print("\nencoder_forward on a toy volume (fresh process per backend)")
    for name in _backend.available():
        env = dict(os.environ, CORRVERIFY_BACKEND=name)
        out = subprocess.run([sys.executable, "-c", ENCODER.format(n=n)], env=env, capture_output=True, text=True,
                             check=True).stdout.split()
        print(f"  {out[0]:<10}{float(out[1]) * 1e3:8.2f} ms")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    print(f"default backend: {_backend.NAME}")
    bench_kernels(args.repeat)
    bench_encoder(args.repeat)


if __name__ == "__main__":
    main()
