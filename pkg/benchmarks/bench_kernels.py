"""Time the compiled kernels against the numpy fallbacks.

Run with ``python benchmarks/bench_kernels.py``. Each kernel is timed on
both backends with identical inputs and the best of several repeats is
reported, along with the largest absolute difference between outputs.
"""

import argparse
import timeit

import numpy as np

from nesh.kernels import load_backend


def _cases(size, rng):
    dirs = rng.normal(size=(size, 3))
    lines = rng.normal(size=(size // 8, 32))
    positions = np.linspace(-0.25, 31.25, 64)
    tensors = rng.normal(size=(size, 6))
    return [
        ("sh_basis lmax=8", "sh_basis", (dirs, 8)),
        ("catmull_rom_lines", "catmull_rom_lines", (lines, positions)),
        ("sym_eig3", "sym_eig3", (tensors,)),
    ]


def _max_diff(a, b):
    if isinstance(a, tuple):
        # eigenvalues only; eigenvector signs are not unique
        a, b = a[0], b[0]
    return float(np.abs(a - b).max())


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=100_000, help="rows per kernel call")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    py = load_backend("python")
    try:
        cy = load_backend("cython")
    except ImportError:
        parser.exit(1, "compiled kernels are not built; run `pip install -e . --no-build-isolation`\n")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<20} {'python (ms)':>12} {'cython (ms)':>12} {'speedup':>8} {'max |diff|':>11}")
    for label, name, call_args in _cases(args.size, rng):
        times = {}
        for backend_name, mod in (("python", py), ("cython", cy)):
            fn = getattr(mod, name)
            times[backend_name] = min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat))
        diff = _max_diff(getattr(py, name)(*call_args), getattr(cy, name)(*call_args))
        print(
            f"{label:<20} {times['python'] * 1e3:12.2f} {times['cython'] * 1e3:12.2f} "
            f"{times['python'] / times['cython']:8.1f} {diff:11.2e}"
        )


if __name__ == "__main__":
    main()
