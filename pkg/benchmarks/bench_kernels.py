"""Time the compiled and numpy gather/scatter kernels on training-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

Also times one conv3d forward+backward with each backend swapped in, and
checks that both backends give bit-identical results.
"""

import argparse
import time

import numpy as np

from mspharm import _backend
from mspharm import tensor as T

# (batch, channels, padded extent, kernel, stride, output extent)
CASES = [
    ("first layer 6->12", 12, 6, 13, 3, 1, 11),
    ("hidden 12->12", 12, 12, 13, 3, 1, 11),
    ("hidden at 19^3", 12, 12, 21, 3, 1, 19),
    ("strided down 19->11", 12, 12, 23, 3, 2, 11),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    backends = {name: _backend.get_kernels(name) for name in ("python", "cython")}
    print(f"{'case':24s} {'op':8s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for label, n, c, ext, k, s, o in CASES:
        xp = rng.normal(size=(n, c, ext, ext, ext)).astype(np.float32)
        cols = rng.normal(size=(c * k ** 3, n * o ** 3)).astype(np.float32)
        res = {}
        for name, (v2c, c2v) in backends.items():
            res[name] = (
                best_of(lambda: v2c(xp, k, s, o, o, o), repeat),
                best_of(lambda: c2v(cols, n, c, ext, ext, ext, k, s, o, o, o), repeat),
                v2c(xp, k, s, o, o, o),
                c2v(cols, n, c, ext, ext, ext, k, s, o, o, o),
            )
        py, cy = res["python"], res["cython"]
        assert np.array_equal(py[2], cy[2]) and np.array_equal(py[3], cy[3]), label
        for j, op in enumerate(("vol2col", "col2vol")):
            print(f"{label:24s} {op:8s} {py[j] * 1e3:10.2f} {cy[j] * 1e3:10.2f} {py[j] / cy[j]:8.2f}x")


def bench_conv_step(repeat):
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.normal(size=(12, 12, 11, 11, 11)))
    w = T.Tensor(rng.normal(size=(12, 12, 3, 3, 3)) * 0.1)
    b = T.Tensor(np.zeros(12))

    def step():
        with T.Tape() as tape:
            loss = T.mse_loss(T.conv3d(x, w, b, 1, 1), T.Tensor(np.zeros((12, 12, 11, 11, 11))))
        T.backward(loss, tape)

    saved = _backend.vol2col, _backend.col2vol
    out = {}
    try:
        for name in ("python", "cython"):
            _backend.vol2col, _backend.col2vol = _backend.get_kernels(name)
            out[name] = best_of(step, repeat)
    finally:
        _backend.vol2col, _backend.col2vol = saved
    print(f"\nconv3d 12->12 on 12x11^3, forward+backward: python {out['python'] * 1e3:.1f} ms, "
          f"cython {out['cython'] * 1e3:.1f} ms ({out['python'] / out['cython']:.2f}x)")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"active backend: {_backend.BACKEND}\n")
    bench_kernels(args.repeat)
    bench_conv_step(args.repeat)


if __name__ == "__main__":
    main()
