"""Time the numpy fallback against the compiled kernels.

    python3 benchmarks/bench_kernels.py [--repeats 5]

Covers the three hot kernels on shapes the models actually use, plus one
full training step of the tiny preset so the end-to-end effect is visible.
Switching happens through _kernels.set_backend, the same knob the tests use.
"""

import argparse
import time

import numpy as np

from stattn import _kernels
from stattn.blocks import build_model, preset
from stattn.tensor import Tensor
from stattn.train import cross_entropy


def timeit(fn, repeats: int) -> float:
    fn()  # warm up, exclude first-call setup
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(rng):
    # (label, builder) where builder returns a zero-arg callable
    x_im = rng.standard_normal((8, 64, 56, 56)).astype(np.float32)
    cols = _kernels.im2col(x_im, 3, 3, 1, 1)
    x_dw = rng.standard_normal((8, 96, 28, 28)).astype(np.float32)
    w_dw = rng.standard_normal((96, 3, 3)).astype(np.float32)
    gy_dw = rng.standard_normal(x_dw.shape).astype(np.float32)
    return [
        ("im2col    8x64x56x56 k3 s1", lambda: _kernels.im2col(x_im, 3, 3, 1, 1)),
        ("col2im    same geometry   ", lambda: _kernels.col2im(cols, 56, 56, 3, 3, 1, 1)),
        ("dw3x3 fwd 8x96x28x28      ", lambda: _kernels.depthwise3x3_forward(x_dw, w_dw)),
        ("dw3x3 dx  same geometry   ", lambda: _kernels.depthwise3x3_grad_input(gy_dw, w_dw)),
        ("dw3x3 dw  same geometry   ", lambda: _kernels.depthwise3x3_grad_weight(x_dw, gy_dw)),
    ]


def train_step_case(rng):
    model = build_model(preset("tiny"), seed=0)
    xb = rng.standard_normal((16, 3, 32, 32)).astype(np.float32)
    yb = rng.integers(0, 2, size=16).astype(np.int64)
    step_rng = np.random.default_rng(0)

    def step():
        logits = model.forward(xb, training=True, rng=step_rng)
        loss = cross_entropy(logits, yb)
        model.zero_grad()
        loss.backward()

    return ("tiny train step b=16      ", step)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if not _kernels.HAS_FASTCORE:
        print("compiled extension not built; only the numpy backend is available")
    backends = _kernels.available_backends()
    rng = np.random.default_rng(42)
    cases = kernel_cases(rng) + [train_step_case(rng)]

    print(f"{'case':<28}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    restore = _kernels.backend_name()
    try:
        for label, fn in cases:
            times = {}
            for b in backends:
                _kernels.set_backend(b)
                times[b] = timeit(fn, args.repeats)
            row = f"{label:<28}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
            if "fast" in times and "numpy" in times:
                row += f"{times['numpy'] / times['fast']:>9.2f}x"
            print(row)
    finally:
        _kernels.set_backend(restore)


if __name__ == "__main__":
    main()
