"""Compare the numba and pure-numpy kernel backends on encoder-shaped
workloads.

Run from the repository root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --repeats 5 --batch 32

Each row times one (layer shape, direction) pair on both backends and
reports the ratio. Shapes follow the ten-layer encoder at two sizes: the
small desk configuration and a wider variant where the compiled loops
have enough arithmetic to amortise their overhead.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from partsim import backend
from partsim import _kernels_numpy

try:
    from partsim import _kernels_numba

    HAVE_NUMBA = True
except ImportError:
    _kernels_numba = None
    HAVE_NUMBA = False


# (label, batch, c_in, c_out, height, width)
SHAPES = [
    ("desk L1", 32, 1, 8, 64, 126),
    ("desk L2", 32, 8, 8, 64, 126),
    ("desk L4", 32, 12, 12, 32, 63),
    ("desk L6", 32, 16, 16, 16, 31),
    ("desk L8", 32, 24, 24, 8, 15),
    ("desk L10", 32, 32, 32, 4, 7),
    ("wide L2", 8, 64, 64, 64, 126),
    ("wide L6", 8, 128, 128, 16, 31),
]


def time_call(fn, *args, repeats: int) -> float:
    fn(*args)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def conv_flops(batch: int, c_in: int, c_out: int, h: int, w: int) -> float:
    return 2.0 * batch * c_in * c_out * 9 * h * w


def bench_shape(label, batch, c_in, c_out, h, w, repeats, rng):
    x = rng.normal(size=(batch, c_in, h, w)).astype(np.float32)
    wgt = rng.normal(size=(c_out, c_in, 3, 3)).astype(np.float32)
    dy = rng.normal(size=(batch, c_out, h, w)).astype(np.float32)

    rows = []
    for direction, np_fn, nb_fn, args in [
        ("fwd", _kernels_numpy.conv2d_forward,
         _kernels_numba.conv2d_forward if HAVE_NUMBA else None, (x, wgt)),
        ("bwd", _kernels_numpy.conv2d_backward,
         _kernels_numba.conv2d_backward if HAVE_NUMBA else None, (x, wgt, dy)),
    ]:
        t_np = time_call(np_fn, *args, repeats=repeats)
        flops = conv_flops(batch, c_in, c_out, h, w)
        if direction == "bwd":
            flops *= 2.0
        row = {
            "label": f"{label} {direction}",
            "numpy_ms": t_np * 1e3,
            "numpy_gflops": flops / t_np / 1e9,
        }
        if nb_fn is not None:
            t_nb = time_call(nb_fn, *args, repeats=repeats)
            row["numba_ms"] = t_nb * 1e3
            row["numba_gflops"] = flops / t_nb / 1e9
            row["ratio"] = t_np / t_nb
        rows.append(row)
    return rows


def check_agreement(rng) -> float:
    """Largest |numpy - numba| over a few random shapes; 0.0 when numba
    is unavailable."""
    if not HAVE_NUMBA:
        return 0.0
    worst = 0.0
    for _ in range(3):
        batch, c_in, c_out = rng.integers(1, 5, size=3)
        h, w = rng.integers(4, 12, size=2)
        x = rng.normal(size=(batch, c_in, h, w)).astype(np.float32)
        wgt = rng.normal(size=(c_out, c_in, 3, 3)).astype(np.float32)
        a = _kernels_numpy.conv2d_forward(x, wgt)
        b = _kernels_numba.conv2d_forward(x, wgt)
        worst = max(worst, float(np.abs(a - b).max()))
    return worst


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=3,
                        help="timed repeats per cell (best is kept)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    print(f"active backend: {backend.backend_name()}")
    print(f"numba available: {HAVE_NUMBA}")
    if HAVE_NUMBA:
        print(f"max |numpy - numba| on random shapes: {check_agreement(rng):.2e}")
    print()

    header = (f"{'shape':<14}{'numpy ms':>10}{'np GF/s':>9}"
              f"{'numba ms':>10}{'nb GF/s':>9}{'np/nb':>7}")
    print(header)
    print("-" * len(header))
    for shape in SHAPES:
        for row in bench_shape(*shape, repeats=args.repeats, rng=rng):
            line = (f"{row['label']:<14}{row['numpy_ms']:>10.2f}"
                    f"{row['numpy_gflops']:>9.2f}")
            if "numba_ms" in row:
                line += (f"{row['numba_ms']:>10.2f}{row['numba_gflops']:>9.2f}"
                         f"{row['ratio']:>7.2f}")
            else:
                line += f"{'-':>10}{'-':>9}{'-':>7}"
            print(line)
    print()
    print("np/nb > 1 means the numba kernel is faster for that shape.")


if __name__ == "__main__":
    main()
