"""Time the numba kernels against their numpy twins, plus one full training step.

    python3 benchmarks/bench_kernels.py [--repeat 5]

The training-step timing honours ``NRCED_NUMBA`` (set it to 0 to time the
pure-numpy path); the per-kernel table always shows both.
"""

import argparse
import time

import numpy as np

from nrced import _accel, kernels, model, optim

# layer shapes of the default network at batch 64
CONV_CASES = [
    ("enc.conv0", 64, 10, 32, 16),
    ("enc.conv1", 64, 32, 64, 8),
    ("dec.tconv0", 64, 64, 32, 8),
    ("dec.tconv1", 64, 32, 24, 16),
]


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for name, n, c, o, h in CONV_CASES:
        x = rng.normal(size=(n, c, h, h))
        w = rng.normal(size=(o, c, 3, 3))
        b = rng.normal(size=o)
        dy = rng.normal(size=(n, o, h, h))
        for op, args in (("forward", (x, w, b)), ("grad_input", (dy, w)),
                         ("grad_weight", (x, dy, 3, 3))):
            f_np = getattr(kernels, f"conv2d_{op}_np")
            f_nb = getattr(kernels, f"conv2d_{op}_nb")
            rows.append((f"{name} {op}", best_of(lambda: f_np(*args), repeat),
                         best_of(lambda: f_nb(*args), repeat)))
    x = rng.normal(size=(64, 32, 16, 16))
    y, idx = kernels.maxpool2x2_forward_np(x)
    rows.append(("maxpool forward", best_of(lambda: kernels.maxpool2x2_forward_np(x), repeat),
                 best_of(lambda: kernels.maxpool2x2_forward_nb(x), repeat)))
    rows.append(("maxpool backward",
                 best_of(lambda: kernels.maxpool2x2_backward_np(y, idx), repeat),
                 best_of(lambda: kernels.maxpool2x2_backward_nb(y, idx), repeat)))
    d = 6144 * 6144
    p, g = rng.normal(size=d), rng.normal(size=d)
    m, v = np.zeros(d), np.zeros(d)
    rows.append(("adam 6144x6144",
                 best_of(lambda: kernels.adam_update_np(p, g, m, v, 5e-3, 0.9, 0.999, 1e-8, 1), repeat),
                 best_of(lambda: kernels.adam_update_nb(p, g, m, v, 5e-3, 0.9, 0.999, 1e-8, 1), repeat)))
    return rows


def bench_step(repeat):
    cfg = model.ModelConfig()
    params = model.init_params(cfg, 0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(cfg.batch_size, cfg.in_channels, 16, 16))
    y = rng.normal(size=(cfg.batch_size, cfg.out_channels, 16, 16))
    state = optim.adam_init(params.arrays)

    def step():
        trace = model.forward(params, x, "train", rng)
        _, grads = model.backward(params, trace, y)
        optim.adam_step(params.arrays, grads, state)

    return best_of(step, repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.NUMBA_AVAILABLE:
        print("numba is not installed; only the numpy path can be timed")
    else:
        print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s}")
        for name, t_np, t_nb in bench_kernels(args.repeat):
            print(f"{name:28s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:8.2f}x")
    backend = "numba" if _accel.USE_NUMBA else "numpy"
    print(f"\ntraining step, batch 64, {backend} kernels: {bench_step(args.repeat):.3f} s")


if __name__ == "__main__":
    main()
