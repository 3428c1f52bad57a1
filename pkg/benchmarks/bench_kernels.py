"""Time the compiled measurement kernels against the numpy fallback.

Builds the 118-bus full-selection quadratic-form pack and times the four hot
operations on both backends.  Run from the repository root:

    python3 benchmarks/bench_kernels.py [--repeats 30] [--batch 256]
"""

import argparse
import importlib.resources as ir
import time

import numpy as np

from gridse import case_io, grid_model, kernels, measurement


def build_pack():
    case = case_io.load_case(ir.files("gridse").joinpath("data/case118.m"))
    adm = grid_model.build_admittance(case)
    mm = measurement.build_measurement_model(adm, measurement.full_selection(adm))
    return case, mm.pack


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30,
                    help="timing repetitions; best run is reported")
    ap.add_argument("--batch", type=int, default=256,
                    help="rows in the batched calls")
    args = ap.parse_args()

    case, pack = build_pack()
    rng = np.random.default_rng(0)
    v = rng.uniform(0.9, 1.1, pack.n_state)
    V = rng.uniform(0.9, 1.1, (args.batch, pack.n_state))
    G = rng.standard_normal((args.batch, pack.n_meters))

    ops = {
        "values": lambda b: pack.values(v, backend=b),
        "jacobian": lambda b: pack.jacobian(v, backend=b),
        f"values_batch[{args.batch}]": lambda b: pack.values_batch(V, backend=b),
        f"vjp_batch[{args.batch}]": lambda b: pack.vjp_batch(V, G, backend=b),
    }
    backends = kernels.available_backends()
    print(f"case {case.name}: N={case.n_bus} buses, M={pack.n_meters} meters, "
          f"{len(pack.vals)} stored entries")
    print(f"backends: {', '.join(backends)} (default {kernels.default_backend()})")
    if "native" not in backends:
        print("compiled kernels not built; timing the python backend only")

    header = f"{'operation':24s}" + "".join(f"{b:>12s}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10s}"
    print(header)
    for name, op in ops.items():
        for b in backends:
            ref = op(backends[0])
            if not np.allclose(op(b), ref, rtol=1e-12, atol=1e-12):
                raise AssertionError(f"{name}: backend {b!r} disagrees")
        times = [timeit(lambda b=b: op(b), args.repeats) for b in backends]
        line = f"{name:24s}" + "".join(f"{t * 1e6:10.1f}us" for t in times)
        if len(times) == 2:
            line += f"{times[1] / times[0]:9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
