"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Times each kernel on both backends, checks the outputs agree bit for bit,
then times one training step with each backend swapped in.
"""
import argparse
import timeit

import numpy as np

from pmfusion import _kernels_py, kernels
from pmfusion.train import TrainConfig, make_batch, make_optimizers, project_record, synthetic_dataset, train_step
from pmfusion.network import TSNet

try:
    from pmfusion import _ckernels
except ImportError:
    _ckernels = None


def kernel_cases(rng):
    x = rng.normal(size=(8, 16, 32, 32))
    cols = _kernels_py.im2col(x, 3, 3, 1, 1, 1)
    n, H, W = 20000, 64, 512
    pix = rng.integers(-1, H * W, n)
    depth = rng.uniform(1, 80, n)
    return {
        "im2col 8x16x32x32 k3": lambda m: m.im2col(x, 3, 3, 1, 1, 1),
        "col2im 8x16x32x32 k3": lambda m: m.col2im(cols, x.shape, 3, 3, 1, 1, 1),
        "maxpool2 8x16x32x32": lambda m: m.maxpool2(x),
        "zbuffer 20k pts 64x512": lambda m: m.zbuffer(pix, depth, H, W),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(u, v) for u, v in zip(a, b))
    return np.array_equal(a, b)


def time_train_step(impl, repeat):
    cfg = TrainConfig(steps=repeat + 1)
    samples = [project_record(r, cfg) for r in synthetic_dataset(cfg)]
    batch = make_batch(samples, cfg.network)
    saved = kernels._impl
    kernels._impl = impl
    try:
        net = TSNet(cfg.network, seed=0)
        opt_c, opt_l = make_optimizers(net, cfg)
        step = iter(range(repeat + 1))
        return min(timeit.repeat(lambda: train_step(net, batch, cfg, opt_c, opt_l, next(step), cfg.steps),
                                 number=1, repeat=repeat))
    finally:
        kernels._impl = saved


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels not built; only the numpy backend is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26s}{'numpy ms':>10s}{'cython ms':>11s}{'speedup':>9s}  identical")
    for name, fn in kernel_cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<26s}{t_py:10.3f}{t_cy:11.3f}{t_py / t_cy:8.1f}x  {same(fn(_kernels_py), fn(_ckernels))}")
    reps = max(3, args.repeat // 4)
    t_py = time_train_step(_kernels_py, reps) * 1e3
    t_cy = time_train_step(_ckernels, reps) * 1e3
    print(f"{'train step (8x32x32)':<26s}{t_py:10.1f}{t_cy:11.1f}{t_py / t_cy:8.1f}x")


if __name__ == "__main__":
    main()
