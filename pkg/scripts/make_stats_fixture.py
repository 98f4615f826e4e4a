#!/usr/bin/env python3
"""Regenerate tests/data/t_test_reference.json.

Computes two-sided paired t-test statistics for a fixed set of difference
vectors with 50-digit mpmath arithmetic, integrating the Student-t density
directly by quadrature (no incomplete-beta shortcut, so the fixture is an
independent reference for the library implementation).  Run from the repo
root; requires mpmath.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from mpmath import mp, mpf, gamma, pi, quad, sqrt

mp.dps = 50


def t_density(nu):
    norm = gamma((nu + 1) / 2) / (sqrt(nu * pi) * gamma(nu / 2))

    def pdf(x):
        return norm * (1 + x * x / nu) ** (-(nu + 1) / 2)

    return pdf


def two_sided_p(t_abs, nu):
    pdf = t_density(mpf(nu))
    tail = quad(pdf, [t_abs, mp.inf])
    return 2 * tail


def case_stats(diffs):
    n = len(diffs)
    xs = [mpf(repr(d)) for d in diffs]
    mean = sum(xs) / n
    var = sum((x - mean) ** 2 for x in xs) / (n - 1)
    sd = sqrt(var)
    t = mean / (sd / sqrt(n))
    p = two_sided_p(abs(t), n - 1)
    return float(t), float(p)


def build_vectors():
    rng = np.random.default_rng(20240817)
    vectors = []
    sizes = [5, 8, 10, 12, 15, 20, 25, 30, 40, 50, 60, 75, 90, 100, 120, 150, 180, 200]
    for i, n in enumerate(sizes):
        shift = [0.0, 0.002, -0.004, 0.01, 0.05, -0.02][i % 6]
        scale = [0.05, 0.01, 0.2, 0.002][i % 4]
        vec = rng.normal(loc=shift, scale=scale, size=n)
        vectors.append([float(x) for x in vec])
    # two hand-picked extremes: a strong effect and a near-null one
    vectors.append([0.101, 0.099, 0.1005, 0.0998, 0.1002, 0.0999, 0.1001, 0.1])
    vectors.append([1e-4, -1e-4, 2e-4, -2e-4, 5e-5, -5e-5, 1.5e-4, -1.2e-4, 3e-5])
    return vectors


def main():
    out_path = Path(__file__).resolve().parents[1] / "tests" / "data" / "t_test_reference.json"
    cases = []
    for diffs in build_vectors():
        t, p = case_stats(diffs)
        cases.append({"diffs": diffs, "t": t, "p": p})
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps({"cases": cases}, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(cases)} cases to {out_path}")


if __name__ == "__main__":
    main()
