"""Benchmark the compiled conv2d extension against the numpy fallback.

Runs forward and backward timings over a range of shapes, from the tiny
single-channel stem convolution (where the compiled direct loop wins) up to
wide multi-channel layers (where the BLAS-backed im2col fallback wins).  The
dispatch threshold in ``damot.kernels`` (``EXT_TAP_LIMIT``) was chosen from
exactly this kind of measurement: the extension is only used when
``c_in * c_out * kh * kw`` is small enough that loop overhead beats BLAS.

Usage:
    python3 benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from damot import kernels
from damot.kernels import _fallback

# (batch, c_in, h, w, c_out, kh, kw, stride, label)
SHAPES = [
    (2, 1, 64, 64, 8, 3, 3, 2, "stem 1->8"),
    (2, 8, 32, 32, 16, 3, 3, 1, "mid 8->16"),
    (2, 16, 32, 32, 32, 3, 3, 2, "mid 16->32"),
    (2, 32, 16, 16, 64, 3, 3, 2, "deep 32->64"),
    (2, 64, 8, 8, 128, 3, 3, 1, "wide 64->128"),
]


def time_fn(fn, *args, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if kernels.BACKEND != "ext":
        print("compiled extension not available; benchmarking fallback only")

    rng = np.random.default_rng(0)
    hdr = (
        f"{'shape':<14}{'taps':>8}{'fwd ext':>12}{'fwd np':>12}"
        f"{'bwd ext':>12}{'bwd np':>12}  winner"
    )
    print(hdr)
    print("-" * len(hdr))
    for b, ci, h, w, co, kh, kw, st, label in SHAPES:
        x = rng.standard_normal((b, ci, h, w))
        wt = rng.standard_normal((co, ci, kh, kw))
        taps = ci * co * kh * kw

        out = _fallback.conv2d_forward(x, wt, st)
        gy = rng.standard_normal(out.shape)

        f_np = time_fn(_fallback.conv2d_forward, x, wt, st,
                       repeats=args.repeats)
        b_np = time_fn(_fallback.conv2d_backward, x, wt, gy, st,
                       repeats=args.repeats)

        if kernels.BACKEND == "ext":
            from damot.kernels import _impl  # type: ignore[attr-defined]
            out_ext = _impl.conv2d_forward(x, wt, st)
            assert np.allclose(out, out_ext, atol=1e-10), label
            f_ext = time_fn(_impl.conv2d_forward, x, wt, st,
                            repeats=args.repeats)
            b_ext = time_fn(_impl.conv2d_backward, x, wt, gy, st,
                            repeats=args.repeats)
            winner = "ext" if (f_ext + b_ext) < (f_np + b_np) else "numpy"
            print(f"{label:<14}{taps:>8}{f_ext * 1e3:>10.3f}ms"
                  f"{f_np * 1e3:>10.3f}ms{b_ext * 1e3:>10.3f}ms"
                  f"{b_np * 1e3:>10.3f}ms  {winner}")
        else:
            print(f"{label:<14}{taps:>8}{'-':>12}{f_np * 1e3:>10.3f}ms"
                  f"{'-':>12}{b_np * 1e3:>10.3f}ms  numpy")

    print()
    print(f"dispatch: extension used when taps <= {kernels.EXT_TAP_LIMIT} "
          f"(BACKEND={kernels.BACKEND})")


if __name__ == "__main__":
    main()
