"""Compiled vs numpy batched exponential, forward and forward+backward.

    python3 benchmarks/bench_expm.py [--batch 32] [--repeat 200]

Prints one JSON record per (dtype, d) plus a table on stderr.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from liestate import _core


def _inputs(rng, batch, d, complex_):
    x = rng.normal(size=(batch, d, d))
    if complex_:
        x = x + 1j * rng.normal(size=(batch, d, d))
    return 0.5 * (x - np.conj(np.swapaxes(x, -1, -2)))


def bench(module, a, g, repeat):
    fwd = min(timeit.repeat(lambda: module.expm_forward(a, keep_cache=False), number=1, repeat=repeat))

    def both():
        _, cache = module.expm_forward(a, keep_cache=True)
        module.expm_backward(cache, g)

    return fwd, min(timeit.repeat(both, number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--repeat", type=int, default=200)
    parser.add_argument("--dims", default="2,4,6,8,12,16")
    args = parser.parse_args(argv)

    backs = _core.backends()
    if "cython" not in backs:
        sys.stderr.write("compiled extension not built; only the numpy path is timed\n")
    rng = np.random.default_rng(0)
    sys.stderr.write(f"{'dtype':>10} {'d':>3} " + " ".join(f"{n + ' fwd':>13} {n + ' f+b':>13}" for n in backs)
                     + "  (ms)\n")
    for complex_ in (False, True):
        for d in (int(x) for x in args.dims.split(",")):
            a = _inputs(rng, args.batch, d, complex_)
            g = rng.normal(size=a.shape) + (1j * rng.normal(size=a.shape) if complex_ else 0)
            rec = {"dtype": "complex128" if complex_ else "float64", "d": d, "batch": args.batch,
                   "dispatch": "cython" if _core._pick(d).__name__.endswith("_ext") else "python"}
            for name, mod in backs.items():
                fwd, both = bench(mod, a, g, args.repeat)
                rec[f"{name}_fwd_ms"] = round(fwd * 1e3, 4)
                rec[f"{name}_fwd_bwd_ms"] = round(both * 1e3, 4)
            print(json.dumps(rec))
            cells = " ".join(f"{rec[n + '_fwd_ms']:>13.3f} {rec[n + '_fwd_bwd_ms']:>13.3f}" for n in backs)
            sys.stderr.write(f"{rec['dtype']:>10} {d:>3} {cells}\n")


if __name__ == "__main__":
    main()
