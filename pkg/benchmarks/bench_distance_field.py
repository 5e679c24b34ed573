"""Benchmark the distance-field backends against each other.

Times the compiled grid kernel (when built) and the vectorized numpy scan
on the same synthetic scenes, checks they agree, and prints a small table.

Usage: python benchmarks/bench_distance_field.py [--resolution 64] [--scenes 10]
"""

import argparse
import time

import numpy as np

from sketchseg.data import SynthConfig, synth_corpus
from sketchseg.raster import available_backends, distance_field, distance_field_naive


def _scenes(n: int, resolution: int):
    corpus = synth_corpus(SynthConfig(template="face", count=n,
                                      resolution=resolution, seed=7))
    return [ls.sketch.strokes for ls in corpus]


def _time_backend(scenes, resolution: int, backend: str, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for strokes in scenes:
            distance_field(strokes, resolution, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--resolution", type=int, default=64)
    ap.add_argument("--scenes", type=int, default=10)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    scenes = _scenes(args.scenes, args.resolution)
    backends = available_backends()
    print(f"backends available: {', '.join(backends)}")
    print(f"{args.scenes} scenes at {args.resolution}x{args.resolution}, "
          f"best of {args.repeats} runs\n")

    worst = 0.0
    for strokes in scenes:
        ref = distance_field_naive(strokes, args.resolution).grid
        for backend in backends:
            got = distance_field(strokes, args.resolution, backend=backend).grid
            worst = max(worst, float(np.max(np.abs(got - ref))))
    print(f"max |backend - naive| over all scenes: {worst:.3e}")

    naive_t = float("inf")
    t0 = time.perf_counter()
    for strokes in scenes:
        distance_field_naive(strokes, args.resolution)
    naive_t = time.perf_counter() - t0
    print(f"\n{'backend':<10} {'seconds':>10} {'vs naive':>10}")
    print(f"{'naive':<10} {naive_t:>10.4f} {1.0:>9.1f}x")
    for backend in backends:
        t = _time_backend(scenes, args.resolution, backend, args.repeats)
        print(f"{backend:<10} {t:>10.4f} {naive_t / t:>9.1f}x")


if __name__ == "__main__":
    main()
