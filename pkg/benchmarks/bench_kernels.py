#!/usr/bin/env python3
"""Timings for the hot kernels under the numba and numpy backends, plus a
full training step. Run: python benchmarks/bench_kernels.py [--repeat N]"""

import argparse
import dataclasses
import time

import numpy as np

from semistereo import backend, kernels
from semistereo.data import ToySceneSpec, generate_toy_pair
from semistereo.model import ModelConfig
from semistereo.trainer import OptimizerConfig, TrainConfig, _fresh_state, train_step_selfsup, train_step_supervised


def timeit(fn, repeat):
    fn()  # warm up (numba compiles here)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def kernel_cases(rng):
    x = rng.standard_normal((1, 16, 32, 64)).astype(np.float32)
    w = rng.standard_normal((32, 16, 3, 3)).astype(np.float32)
    b = np.zeros(32, np.float32)
    gy = rng.standard_normal((1, 32, 16, 32)).astype(np.float32)
    feat = rng.standard_normal((1, 32, 8, 16)).astype(np.float32)
    img = rng.standard_normal((1, 3, 64, 128)).astype(np.float32)
    disp = rng.uniform(0, 8, (1, 64, 128)).astype(np.float32)
    vol_gy = rng.standard_normal((1, 11, 8, 16)).astype(np.float32)
    return {
        "conv2d fwd 16->32 @32x64": lambda: kernels.conv2d_forward(x, w, b, 2, 1),
        "conv2d bwd_input": lambda: kernels.conv2d_bwd_input(gy, w, 2, 1, 32, 64),
        "conv2d bwd_weight": lambda: kernels.conv2d_bwd_weight(x, gy, 2, 1, 3, 3),
        "corr1d fwd D=10 @8x16": lambda: kernels.corr1d_forward(feat, feat, 10),
        "corr1d bwd": lambda: kernels.corr1d_backward(feat, feat, vol_gy),
        "warp fwd 3ch @64x128": lambda: kernels.warp1d_forward(img, disp),
        "warp bwd": lambda: kernels.warp1d_backward(img, disp, img),
    }


def train_cases():
    model = ModelConfig(base_channels=8, max_displacement=10)
    cfg = TrainConfig(model=model, optimizer=OptimizerConfig(learning_rate=3e-4), seed=0)
    spec = ToySceneSpec(width=128, height=64, n_layers=2, disparity_range=(2, 10))
    sample = generate_toy_pair(spec, 0)
    real = dataclasses.replace(sample, domain="real")
    state = _fresh_state(cfg)
    return {
        "train step supervised (bc=8, 64x128)": lambda: train_step_supervised(state, [sample]),
        "train step self-sup PH (bc=8, 64x128)": lambda: train_step_selfsup(state, [real]),
    }


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    names = ["numpy"] + (["numba"] if backend.HAS_NUMBA else [])
    rows = {}
    for name in names:
        backend.set_backend(name)
        for label, fn in {**kernel_cases(rng), **train_cases()}.items():
            rows.setdefault(label, {})[name] = timeit(fn, args.repeat)
    width = max(len(k) for k in rows)
    header = f"{'case'.ljust(width)}  " + "  ".join(f"{n:>12}" for n in names)
    if len(names) == 2:
        header += f"  {'numba/numpy':>12}"
    print(header)
    print("-" * len(header))
    for label, times in rows.items():
        line = label.ljust(width) + "  " + "  ".join(f"{times[n]*1e3:9.3f} ms" for n in names)
        if len(names) == 2:
            line += f"  {times['numba'] / times['numpy']:11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
