"""Compare the compiled kernels with the pure-Python fallback.

Usage: python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""

import argparse
import json
import platform
import timeit

import numpy as np

from relaxctrl import _kernels


def _cases(rng):
    n, steps = 255, 400
    sub = np.full(n, -1.0)
    sup = np.full(n, -1.0)
    sub[0] = sup[-1] = 0.0
    diag = np.full(n, 2.0 + 1e-2)
    y0 = rng.normal(size=n)
    coef = rng.normal(size=(steps, n)) * 0.1
    src = rng.normal(size=(steps, n))
    W = rng.dirichlet(np.ones(5), size=2000)
    slots = np.full(2000, 16, dtype=np.int64)
    return {
        "thomas_factor": lambda k: k.thomas_factor(sub, diag, sup),
        "imex_sweep": lambda k: k.imex_sweep(sub, *k.thomas_factor(sub, diag, sup), y0, coef, src, 1e-3),
        "apportion": lambda k: k.apportion(W, slots),
        "interleave": lambda k: k.interleave(k.apportion(W, slots), slots),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None, help="write timings to this file")
    args = ap.parse_args(argv)
    backends = _kernels.backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the fallback is available")
    cases = _cases(np.random.default_rng(0))
    rows = []
    print(f"{'kernel':<15}" + "".join(f"{b:>14}" for b in backends) + "   speedup")
    for name, fn in cases.items():
        times = {}
        for b, mod in backends.items():
            number = 1 if b == "python" else 20
            times[b] = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number
        speed = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        rows.append({"kernel": name, **{f"{b}_seconds": t for b, t in times.items()}, "speedup": speed})
        print(f"{name:<15}" + "".join(f"{times[b] * 1e3:>12.3f}ms" for b in backends) + f"   {speed:8.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"python": platform.python_version(), "rows": rows}, fh, indent=1)


if __name__ == "__main__":
    main()
