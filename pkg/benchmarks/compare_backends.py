"""Time the compiled prefix-average kernel against the numpy fallback.

    python3 benchmarks/compare_backends.py --batch 32 --lengths 256,1024,2048

Prints per-length forward and backward seconds for each backend, the speedup,
and the largest output difference between them.
"""
from __future__ import annotations

import argparse
import time

import numpy as np
from threadpoolctl import threadpool_limits

from agglo import kernels


def softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--classes", type=int, default=8)
    ap.add_argument("--class-width", type=int, default=64)
    ap.add_argument("--lengths", default="128,512,2048")
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args(argv)

    if not kernels.compiled_available():
        raise SystemExit("compiled kernel is not built; run `pip install -e . --no-build-isolation` first")

    rng = np.random.default_rng(0)
    b, m, dm = args.batch, args.classes, args.class_width
    print(f"{'t':>6} {'backend':>9} {'forward s':>10} {'backward s':>11} {'speedup':>8} {'max diff':>9}")
    with threadpool_limits(limits=1):
        for t in (int(x) for x in args.lengths.split(",")):
            cr = softmax(rng.standard_normal((b, t, m))).astype(args.dtype)
            cq = softmax(rng.standard_normal((b, t, m))).astype(args.dtype)
            v = rng.standard_normal((b, t, m, dm)).astype(args.dtype)
            g = rng.standard_normal((b, t, m, dm)).astype(args.dtype)
            timings, outputs = {}, {}
            for name in kernels.BACKENDS:
                with kernels.use_backend(name):
                    out, a, n = kernels.prefix_average_arrays(cr, v, cq)
                    fwd = best_of(lambda: kernels.prefix_average_arrays(cr, v, cq), args.repeats)
                    bwd = best_of(lambda: kernels.prefix_average_backward_arrays(g, cr, v, cq, a, n), args.repeats)
                timings[name] = (fwd, bwd)
                outputs[name] = out
            diff = float(np.abs(outputs["compiled"] - outputs["numpy"]).max())
            for name in kernels.BACKENDS:
                fwd, bwd = timings[name]
                ref = sum(timings["numpy"])
                print(f"{t:>6} {name:>9} {fwd:>10.4f} {bwd:>11.4f} {ref / (fwd + bwd):>7.1f}x {diff:>9.1e}")


if __name__ == "__main__":
    main()
