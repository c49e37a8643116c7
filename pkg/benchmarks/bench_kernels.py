"""Compiled geometry kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints per-kernel wall time for both backends and the speed-up. The workload
matches one scene of anchor scoring: 40 anchors x 6 steps against 8 agents
and a 4-ring drivable region.
"""

import argparse
import time

import numpy as np

from evplan import _geom_py

try:
    from evplan import _geom
except ImportError:
    _geom = None


def workload(seed: int = 0):
    rng = np.random.default_rng(seed)
    K, F, A = 40, 6, 8
    ego = np.concatenate(
        [rng.uniform(-30, 30, (K, F, 2)), rng.uniform(-np.pi, np.pi, (K, F, 1)), np.full((K, F, 2), (4.8, 2.0))],
        axis=-1,
    )
    agents = np.concatenate(
        [rng.uniform(-30, 30, (A, F, 2)), rng.uniform(-np.pi, np.pi, (A, F, 1)), np.full((A, F, 2), (4.5, 1.9))],
        axis=-1,
    )
    theta = np.linspace(0, 2 * np.pi, 60, endpoint=False)
    rings = [np.column_stack([c[0] + r * np.cos(theta), c[1] + r * np.sin(theta)])
             for c, r in (((0, 0), 25.0), ((30, 0), 12.0), ((-30, 5), 10.0), ((0, 30), 8.0))]
    flat = np.concatenate(rings)
    offsets = np.concatenate([[0], np.cumsum([len(r) for r in rings])]).astype(np.int_)
    points = ego[..., :2].reshape(-1, 2) * 1.0
    poly = np.column_stack([np.linspace(-50, 50, 40), 5 * np.sin(np.linspace(0, 3, 40))])
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(poly, axis=0), axis=1))])
    return ego, agents, flat, offsets, points, poly, cum


def timeit(fn, repeat):
    fn()  # warm-up
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    ego, agents, flat, offsets, points, poly, cum = workload()
    cases = {
        "clearance": lambda m: m.clearance(ego, agents),
        "boxes_overlap": lambda m: m.boxes_overlap(ego, agents),
        "region_signed_distance": lambda m: m.region_signed_distance(points, flat, offsets),
        "project_polyline": lambda m: m.project_polyline(points, poly, cum),
    }
    backends = [("python", _geom_py)] + ([("compiled", _geom)] if _geom is not None else [])
    if _geom is None:
        print("compiled extension not built; only the numpy fallback is timed")
    print(f"{'kernel':<24s}" + "".join(f"{name:>14s}" for name, _ in backends) + ("     speed-up" if _geom else ""))
    for name, fn in cases.items():
        times = [timeit(lambda: fn(mod), args.repeat) for _, mod in backends]
        line = f"{name:<24s}" + "".join(f"{1e3 * t:>11.3f} ms" for t in times)
        if len(times) == 2:
            ref = fn(_geom_py)
            got = fn(_geom)
            assert np.allclose(ref, got, atol=1e-9) if not isinstance(ref, tuple) else all(
                np.allclose(a, b, atol=1e-9) for a, b in zip(ref, got)
            )
            line += f"{times[0] / times[1]:>12.1f}x"
        print(line)


if __name__ == "__main__":
    main()
