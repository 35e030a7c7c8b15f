"""Compiled kernels vs the numpy fallback, per kernel and for one full training step.

    python benchmarks/bench_kernels.py [--repeats 5] [--batch 32] [--frames 298]

Shapes follow the desk-scale 3x2x64 model: 64 channels inside the blocks,
3072 after the epilogue. Reports the best of ``--repeats`` wall-clock runs.
"""
import argparse
import timeit

import numpy as np

from titanet_lid.model import ModelConfig, build_model
from titanet_lid.nn import functional as F
from titanet_lid.nn import kernels


def kernel_cases(n, t, rng):
    cases = []
    for c in (64, 3072):
        x = rng.normal(size=(n, c, t))
        g = rng.normal(size=x.shape)
        lengths = np.full(n, t, dtype=np.int64)
        lengths[::2] = t * 2 // 3
        scale, shift = rng.uniform(0.5, 2, c), rng.normal(size=c)
        mean, var, _ = kernels.get_backend("numpy")["bn_stats"](x, lengths)
        inv_std = 1.0 / np.sqrt(var + 1e-5)
        pooled, floored = kernels.get_backend("numpy")["bn_relu_pool_forward"](x, scale, shift, lengths, 1e-10)
        gp = rng.normal(size=pooled.shape)
        tag = f"C={c}"
        if c == 64:
            w = rng.normal(size=(c, 15))
            cases += [
                (f"dwconv_forward k=15 {tag}", "dwconv_forward", (x, w)),
                (f"dwconv_backward k=15 {tag}", "dwconv_backward", (g, x, w)),
            ]
        cases += [
            (f"bn_stats {tag}", "bn_stats", (x, lengths)),
            (f"affine_act_forward {tag}", "affine_act_forward", (x, scale, shift, True)),
            (f"bn_backward {tag}", "bn_backward", (g, x, scale, shift, mean, inv_std, lengths, True, True)),
            (f"bn_relu_pool_forward {tag}", "bn_relu_pool_forward", (x, scale, shift, lengths, 1e-10)),
            (f"bn_relu_pool_backward {tag}", "bn_relu_pool_backward",
             (gp, x, scale, shift, mean, inv_std, pooled, floored, lengths, True)),
        ]
    return cases


def best_of(fn, repeats):
    return min(timeit.repeat(fn, number=1, repeat=repeats))


def train_step(model, x, y):
    model.zero_grad()
    loss = F.weighted_cross_entropy(model.forward(x, mode="train", seed=0), y)
    loss.backward()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--frames", type=int, default=298, help="3 s of audio at a 10 ms hop")
    args = ap.parse_args()
    if not kernels.compiled_available():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")

    rng = np.random.default_rng(0)
    print(f"batch {args.batch}, {args.frames} frames, best of {args.repeats}")
    print(f"{'kernel':<38}{'numpy ms':>10}{'compiled ms':>13}{'speedup':>9}")
    for label, name, fn_args in kernel_cases(args.batch, args.frames, rng):
        py = kernels.get_backend("numpy")[name]
        cy = kernels.get_backend("compiled")[name]
        t_py = best_of(lambda: py(*fn_args), args.repeats)
        t_cy = best_of(lambda: cy(*fn_args), args.repeats)
        print(f"{label:<38}{1e3 * t_py:>10.1f}{1e3 * t_cy:>13.1f}{t_py / t_cy:>8.1f}x")

    model = build_model(ModelConfig(repeats=2, channels=64, num_classes=5), seed=0)
    x = rng.normal(size=(args.batch, 80, args.frames))
    y = rng.integers(0, 5, args.batch)
    before = kernels.BACKEND
    times = {}
    try:
        for backend in ("numpy", "compiled"):
            kernels.set_backend(backend)
            train_step(model, x, y)  # warm-up
            times[backend] = best_of(lambda: train_step(model, x, y), max(1, args.repeats // 2))
    finally:
        kernels.set_backend(before)
    print(f"{'train step (3x2x64, fwd+bwd)':<38}{1e3 * times['numpy']:>10.0f}{1e3 * times['compiled']:>13.0f}"
          f"{times['numpy'] / times['compiled']:>8.1f}x")


if __name__ == "__main__":
    main()
