"""Compare the compiled and pure-Python scheduler kernels.

    python3 benchmarks/bench_sched.py [--domains 8] [--slots 200000] [--repeat 5]
"""

from __future__ import annotations

import argparse
import random
import statistics
import timeit

from edera.hv import sched


def main() -> int:
    p = argparse.ArgumentParser()
    p.add_argument("--domains", type=int, default=8)
    p.add_argument("--slots", type=int, default=200_000)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    rng = random.Random(args.seed)
    weights = [rng.randint(1, 1024) for _ in range(args.domains)]
    kernels = {"python": sched.share_ticks_py}
    if sched.BACKEND == "cython":
        kernels["cython"] = sched.share_ticks
    else:
        print("compiled kernel not built; timing the Python kernel only")

    results = {name: fn(weights, args.slots) for name, fn in kernels.items()}
    if len({tuple(r) for r in results.values()}) != 1:
        raise SystemExit("kernels disagree")

    timings = {}
    for name, fn in kernels.items():
        runs = timeit.repeat(lambda: fn(weights, args.slots), number=1, repeat=args.repeat)
        timings[name] = runs
        print(f"{name:>7}: median {statistics.median(runs) * 1e3:9.2f} ms  "
              f"({args.domains} domains, {args.slots} slots, {args.repeat} runs)")
    if "cython" in timings:
        speedup = statistics.median(timings["python"]) / statistics.median(timings["cython"])
        print(f"speedup: {speedup:.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
