"""Compare the compiled and pure-Python kernel backends.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is timed on both backends (best of ``--repeat`` runs) and the
outputs are checked for agreement before timings are reported.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from dynadp.accountants import DEFAULT_ORDERS
from dynadp.kernels import available_backends, derive_key

CASES = [
    ("uniform_fill n=1e6", lambda k: k.uniform_fill(derive_key(1, 2, 3), 1_000_000)),
    ("gaussian_fill n=1e6", lambda k: k.gaussian_fill(derive_key(1, 2, 3), 1_000_000, 1.5)),
    ("rdp q=0.01 sigma=6", lambda k: k.rdp_subsampled_gaussian(0.01, 6.0, DEFAULT_ORDERS)),
    ("rdp q=0.05 sigma=2", lambda k: k.rdp_subsampled_gaussian(0.05, 2.0, DEFAULT_ORDERS)),
    ("rdp q=0.001 sigma=20", lambda k: k.rdp_subsampled_gaussian(0.001, 20.0, DEFAULT_ORDERS)),
]


def run(repeat=5):
    backends = available_backends()
    results = []
    for name, fn in CASES:
        outs, times = {}, {}
        for bname, mod in backends.items():
            outs[bname] = np.asarray(fn(mod))
            times[bname] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=repeat))
        ref = outs["python"]
        agree = all(np.allclose(o, ref, rtol=1e-7, atol=1e-15) for o in outs.values())
        row = {"case": name, "agree": bool(agree)}
        row.update({f"{b}_s": t for b, t in times.items()})
        if "cython" in times:
            row["speedup"] = times["python"] / times["cython"]
        results.append(row)
    return results


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="also write results to this file")
    args = p.parse_args(argv)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled backend not built; timing the Python backend only", file=sys.stderr)
    rows = run(args.repeat)
    print(f"{'kernel':<24}{'python [ms]':>13}{'cython [ms]':>13}{'speedup':>9}  agree")
    for r in rows:
        cy = r.get("cython_s")
        cy_ms = "-" if cy is None else f"{1e3 * cy:.2f}"
        speed = "-" if cy is None else f"{r['speedup']:.1f}x"
        print(f"{r['case']:<24}{1e3 * r['python_s']:>13.2f}{cy_ms:>13}{speed:>9}  {r['agree']}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)
    return 0 if all(r["agree"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
