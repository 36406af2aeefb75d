"""Analytic gradients vs central finite differences.

Records a tape through T mean-field rounds, backpropagates a random upstream
gradient, and compares every parameter group against finite differences —
first for the semantic stage alone, then composed with instance
identification and the instance CRF.

Run:  python3 demos/gradient_check.py
"""

import time

from hocrf import GradCheckInstance, gradcheck


def main():
    for label, spec in (
        ("semantic stage, T=3", GradCheckInstance(iterations=3)),
        ("composed with instance CRF, T=2",
         GradCheckInstance(iterations=2, composed=True)),
    ):
        t0 = time.perf_counter()
        report = gradcheck(spec, tolerance=1e-3)
        print("== %s  (%.1fs)" % (label, time.perf_counter() - t0))
        print(report.format_table())
        print()


if __name__ == "__main__":
    main()
