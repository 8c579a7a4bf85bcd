"""Time the compiled and numpy convolution kernels on denoiser-sized shapes.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also times one full training step of the desk model under each backend.
"""
import argparse
import time

import numpy as np

from ficd import _backend
from ficd.model import DenoiserSpec, init_params
from ficd.rng import philox
from ficd.trainer import AdamState, TrainPair, desk_config, train_step

# (name, batch, c_in, c_out, padded side, kernel, stride)
CASES = [
    ("level0 3x3x3", 2, 8, 8, 18, 3, 1),
    ("level1 3x3x3", 2, 16, 16, 10, 3, 1),
    ("down  s2", 2, 8, 8, 18, 3, 2),
    ("wide  3x3x3", 2, 32, 32, 6, 3, 1),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_kernels(mod, repeat):
    rows = []
    g = np.random.default_rng(0)
    for name, n, ci, co, side, k, s in CASES:
        x = g.standard_normal((n, ci, side, side, side))
        w = g.standard_normal((co, ci, k, k, k))
        o = (side - k) // s + 1
        gy = g.standard_normal((n, co, o, o, o))
        fwd = best_of(lambda: mod.conv_forward(x, w, s, o, o, o), repeat)
        bin_ = best_of(lambda: mod.conv_backward_input(gy, w, s, side, side, side), repeat)
        bw = best_of(lambda: mod.conv_backward_weight(gy, x, k, s), repeat)
        rows.append((name, fwd, bin_, bw))
    return rows


def bench_step(name, repeat):
    _backend.use(name)
    cfg = desk_config()
    g = np.random.default_rng(1)
    batch = [TrainPair(g.uniform(-1, 1, (16, 16, 16)), g.uniform(-1, 1, (16, 16, 16)))
             for _ in range(2)]
    params = init_params(DenoiserSpec(), 0)
    state = AdamState.zeros(params)
    sched = cfg.schedule()
    rng = philox(0)
    return best_of(lambda: train_step(params, batch, rng, cfg, sched, state), max(1, repeat // 4))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = _backend.available()
    results = {b: bench_kernels(_backend.load(b), args.repeat) for b in backends}
    print(f"{'case':14s} {'backend':8s} {'forward':>10s} {'grad_in':>10s} {'grad_w':>10s}  (ms)")
    for i, case in enumerate(CASES):
        for b in backends:
            _, f, bi, bw = results[b][i]
            print(f"{case[0]:14s} {b:8s} {f * 1e3:10.3f} {bi * 1e3:10.3f} {bw * 1e3:10.3f}")
    if "cython" in backends:
        print()
        for i, case in enumerate(CASES):
            py, cy = results["python"][i], results["cython"][i]
            speed = [p / c for p, c in zip(py[1:], cy[1:])]
            print(f"{case[0]:14s} speedup  " + "  ".join(f"{s:6.2f}x" for s in speed))
    print()
    active = _backend.NAME
    for b in backends:
        print(f"train step (desk model, 16^3, batch 2) {b:8s} {bench_step(b, args.repeat) * 1e3:9.1f} ms")
    _backend.use(active)


if __name__ == "__main__":
    main()
