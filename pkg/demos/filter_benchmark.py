"""Brute-force vs permutohedral-lattice Gaussian filtering.

Compares accuracy (relative L2 against the exact quadratic filter) and speed
across grid sizes for the spatial and bilateral kernels.

Run:  python3 demos/filter_benchmark.py
"""

import time

import numpy as np

from hocrf import PixelGrid
from hocrf.filters import bilateral_features, build_plan, spatial_features


def blocky_rgb(rng, side, block=8):
    tiles = rng.uniform(0, 255, (side // block + 1, side // block + 1, 3))
    img = np.repeat(np.repeat(tiles, block, axis=0), block, axis=1)
    return img[:side, :side]


def main():
    rng = np.random.default_rng(0)
    print("%6s %10s %12s %12s %9s %9s"
          % ("size", "kernel", "brute (s)", "lattice (s)", "speedup", "rel L2"))
    for side in (32, 64, 96):
        grid = PixelGrid(side, side)
        values = rng.dirichlet(np.ones(4), size=grid.num_pixels)
        img = blocky_rgb(rng, side)
        for name, field in (
            ("spatial", spatial_features(grid, 3.0)),
            ("bilateral", bilateral_features(grid, img, 20.0, 10.0)),
        ):
            t0 = time.perf_counter()
            brute_plan = build_plan(field, "brute")
            brute = brute_plan.apply(values)
            brute_t = time.perf_counter() - t0

            lattice_plan = build_plan(field, "lattice")
            t0 = time.perf_counter()
            lattice = lattice_plan.apply(values)
            lat_t = time.perf_counter() - t0

            rel = np.linalg.norm(lattice - brute) / np.linalg.norm(brute)
            print("%6d %10s %12.4f %12.4f %8.1fx %9.4f"
                  % (side, name, brute_t, lat_t, brute_t / lat_t, rel))


if __name__ == "__main__":
    main()
