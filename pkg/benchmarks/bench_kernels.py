"""Time the numba and pure-numpy kernel backends on network-shaped workloads.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 8]

Prints one row per (kernel, shape) with the best-of-N time for each backend
and the numpy/numba ratio. Also times one full segmentation-network
training step per backend.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from gradmorph import _kernels
from gradmorph import tensor_core as tc
from gradmorph.segnet import SegNetConfig, build_segnet, cross_entropy, seg_logits

# (label, channels in, channels out, spatial size): segnet levels at 64x64
LAYERS = [("enc0", 8, 8, 64), ("enc1", 16, 16, 32), ("enc2", 32, 32, 16), ("mid", 64, 64, 8)]


def best_of(fn, repeat):
    fn()  # warm up (numba compiles on first call)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(batch, rng):
    for label, ci, co, size in LAYERS:
        xp = rng.standard_normal((batch, ci, size + 2, size + 2))
        w = rng.standard_normal((co, ci, 3, 3))
        b = rng.standard_normal(co)
        g = rng.standard_normal((batch, co, size, size))
        yield f"conv fwd {label}", lambda k, xp=xp, w=w, b=b: k["conv2d_valid"](xp, w, b)
        yield f"conv dx  {label}", lambda k, g=g, w=w: k["conv2d_grad_input"](g, w)
        yield f"conv dw  {label}", lambda k, g=g, xp=xp: k["conv2d_grad_weight"](g, xp, 3, 3)
        x = np.ascontiguousarray(xp[:, :, :size, :size])
        yield f"maxpool  {label}", lambda k, x=x: k["maxpool2"](x)


def train_step(batch, rng):
    model = build_segnet(SegNetConfig(), 0)
    x = rng.random((batch, 1, 64, 64))
    y = rng.integers(0, 2, (batch, 64, 64))
    names = list(model.params)

    def step():
        tape = tc.Tape()
        leaves = [tape.leaf(model.params[n]) for n in names]
        loss = cross_entropy(seg_logits(model, x, dict(zip(names, leaves))), y)
        tc.backward(tape, loss)
        tape.release()

    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=8)
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    nb, npk = _kernels.kernels_for("numba"), _kernels.kernels_for("numpy")
    print(f"{'case':<20}{'numba ms':>10}{'numpy ms':>10}{'ratio':>8}")
    for name, fn in kernel_cases(args.batch, rng):
        t_nb = best_of(lambda: fn(nb), args.repeat)
        t_np = best_of(lambda: fn(npk), args.repeat)
        print(f"{name:<20}{t_nb * 1e3:>10.2f}{t_np * 1e3:>10.2f}{t_np / t_nb:>8.2f}")
    step = train_step(args.batch, rng)
    previous = _kernels.backend
    try:
        res = {}
        for backend in ("numba", "numpy"):
            _kernels.set_backend(backend)
            res[backend] = best_of(step, max(1, args.repeat // 2))
    finally:
        _kernels.set_backend(previous)
    print(f"{'segnet train step':<20}{res['numba'] * 1e3:>10.1f}{res['numpy'] * 1e3:>10.1f}"
          f"{res['numpy'] / res['numba']:>8.2f}")


if __name__ == "__main__":
    main()
