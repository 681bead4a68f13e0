"""Compare the compiled and numpy recurrence kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--train]

Times one forward + backward of the fused GRU/classifier unroll at the desk
and full-size shapes, and optionally one training epoch per backend.
"""
import argparse
import time
import timeit

import numpy as np

from sedlm import kernels

SHAPES = {
    # name: (batch, frames, hidden, classes)
    "desk": (8, 128, 32, 6),
    "full": (128, 256, 128, 6),
}


def make_inputs(B, T, H, C, dtype, seed=0):
    rng = np.random.default_rng(seed)
    xproj = rng.normal(size=(B, T, 3 * H)).astype(dtype)
    wc = (rng.normal(size=(C, 3 * H)) * 0.1).astype(dtype)
    u = (rng.normal(size=(H, 3 * H)) / np.sqrt(H)).astype(dtype)
    wo = (rng.normal(size=(H, C)) / np.sqrt(H)).astype(dtype)
    bo = np.zeros(C, dtype=dtype)
    y_true = (rng.random((B, T, C)) < 0.3).astype(dtype)
    truth = (rng.random((B, T)) < 0.5).astype(np.uint8)
    return xproj, wc, u, wo, bo, y_true, truth


def time_kernel(mod, inputs, repeat):
    xproj, wc, u, wo, bo, y_true, truth = inputs
    gy = np.ones_like(y_true)

    def step():
        fp = mod.forward(xproj, wc, u, wo, bo, y_true, truth, False)
        mod.backward(gy, *fp, wc, u, wo)

    step()
    return min(timeit.repeat(step, number=1, repeat=repeat))


def time_epoch(backend):
    from dataclasses import replace

    from sedlm import config as cfgmod
    from sedlm.synthdata import make_corpus
    from sedlm.trainer import train

    cfg = cfgmod.load(cfgmod.shipped("desk"))
    corpus = make_corpus(cfg.corpus, seed=0)
    start = time.perf_counter()
    train(replace(cfg.train, max_epochs=2, backend=backend), corpus)
    return (time.perf_counter() - start) / 2


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--train", action="store_true", help="also time a desk-profile training epoch")
    args = p.parse_args(argv)
    backends = sorted(kernels.BACKENDS)
    if "cython" not in backends:
        print("compiled kernel not built; only the numpy backend is available")
    print(f"{'shape':<8}{'dtype':<9}" + "".join(f"{b + ' ms':>12}" for b in backends) + f"{'speedup':>10}")
    for name, (B, T, H, C) in SHAPES.items():
        for dtype in (np.float32, np.float64):
            inputs = make_inputs(B, T, H, C, dtype)
            ms = {b: 1e3 * time_kernel(kernels.BACKENDS[b], inputs, args.repeat) for b in backends}
            speed = f"{ms['python'] / ms['cython']:>9.1f}x" if "cython" in ms else f"{'-':>10}"
            print(f"{name:<8}{np.dtype(dtype).name:<9}" + "".join(f"{ms[b]:>12.1f}" for b in backends) + speed)
    if args.train:
        for b in backends:
            print(f"desk training epoch [{b}]: {time_epoch(b):.2f}s")


if __name__ == "__main__":
    main()
