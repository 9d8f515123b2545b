"""Compare the sequential and chunked parallel selective scans.

Run: python3 demos/scan_paths.py
"""

import time

import numpy as np

from clinix.scan import discretize, scan_parallel, scan_sequential


def main():
    rng = np.random.default_rng(0)
    C, N = 8, 16
    for L in (64, 512, 4096):
        delta = rng.uniform(1e-3, 1.0, (L, C))
        A = -rng.uniform(0.1, 3.0, (C, N))
        A_bar, B_bar = discretize(delta, A, rng.normal(size=(L, N)))
        args = (rng.normal(size=(L, C)), A_bar, B_bar, rng.normal(size=(L, N)),
                rng.normal(size=C))
        t0 = time.perf_counter()
        seq = scan_sequential(*args).data
        t1 = time.perf_counter()
        par = scan_parallel(*args).data
        t2 = time.perf_counter()
        print(f"L={L:5d}  sequential {t1 - t0:.4f}s  parallel {t2 - t1:.4f}s  "
              f"max |diff| {np.abs(seq - par).max():.2e}")


if __name__ == "__main__":
    main()
