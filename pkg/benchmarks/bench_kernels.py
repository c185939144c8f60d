"""Time the numba and numpy conv kernels, plus one PLS epoch, side by side.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from sfda_prompt import _accel, kernels, pipeline
from sfda_prompt.segnet import SegModelConfig, build_model

SHAPES = [
    # (batch, c_in, side, c_out)
    (16, 1, 64, 4),
    (16, 4, 64, 4),
    (16, 8, 32, 8),
    (16, 16, 16, 16),
]


def best_of(fn, repeat):
    fn()  # warm-up, triggers jit compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def conv_cases(rng):
    for n, c_in, side, c_out in SHAPES:
        x = rng.standard_normal((n, c_in, side, side)).astype(np.float32)
        w = rng.standard_normal((c_out, c_in, 3, 3)).astype(np.float32)
        b = np.zeros(c_out, np.float32)
        g = rng.standard_normal((n, c_out, side, side)).astype(np.float32)
        label = f"{n}x{c_in}x{side}x{side} -> {c_out}"
        yield f"forward  {label}", lambda x=x, w=w, b=b: kernels.conv2d_forward(x, w, b, 1, 1)
        yield f"d input  {label}", lambda g=g, w=w, s=x.shape: kernels.conv2d_backward_input(g, w, s, 1, 1)
        yield f"d kernel {label}", lambda g=g, x=x, s=w.shape: kernels.conv2d_backward_weight(g, x, s, 1, 1)


def pls_epoch(rng):
    model = build_model(SegModelConfig(base_channels=4), seed=0)
    images = rng.standard_normal((32, 1, 64, 64)).astype(np.float32)
    cfg = pipeline.PlsConfig(epochs=1, batch_size=16)
    return lambda: pipeline.run_pls(model, images, cfg, seed=0)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    cases = list(conv_cases(rng)) + [("PLS epoch, 32 images 64x64", pls_epoch(rng))]
    print(f"{'case':<40} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    previous = _accel.backend()
    try:
        for name, fn in cases:
            _accel.set_backend("numba")
            t_nb = best_of(fn, args.repeat)
            _accel.set_backend("numpy")
            t_np = best_of(fn, args.repeat)
            print(f"{name:<40} {t_nb * 1e3:>10.2f} {t_np * 1e3:>10.2f} {t_np / t_nb:>7.1f}x")
    finally:
        _accel.set_backend(previous)


if __name__ == "__main__":
    main()
