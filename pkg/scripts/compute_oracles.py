#!/usr/bin/env python3
"""Cross-check the closed-form oracles by brute force.

  - discrete MI by direct double summation over the joint table
  - Gaussian MI by 2-D quadrature of p(x, c) log p(x|c)/p(x)
  - the Gaussian density ratio integrates to 1 against p(x) for a fixed c
"""
import argparse
import json
import sys
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.stats import norm

sys.path.append(str(Path(__file__).resolve().parents[1]))
from synthdata import DiscreteJointTask, GaussianPairTask, true_density_ratio, true_mi  # noqa: E402


def discrete_mi_by_summation(table) -> float:
    total = 0.0
    px = [sum(row) for row in table]
    pc = [sum(col) for col in zip(*table)]
    for i, row in enumerate(table):
        for j, p in enumerate(row):
            total += p * np.log(p / (px[i] * pc[j]))
    return float(total)


def gaussian_mi_by_quadrature(rho: float, limit: float = 9.0) -> float:
    scale = np.sqrt(1.0 - rho ** 2)

    def integrand(x, c):
        log_ratio = norm.logpdf(x, rho * c, scale) - norm.logpdf(x)
        return norm.pdf(c) * norm.pdf(x, rho * c, scale) * log_ratio

    value, _ = integrate.dblquad(integrand, -limit, limit, -limit, limit, epsabs=1e-10)
    return float(value)


def ratio_normalisation(rho: float, c: float) -> float:
    """Integral over x of p(x) * p(x|c)/p(x); must be 1."""
    task = GaussianPairTask(dim=1, rho=rho)
    value, _ = integrate.quad(lambda x: norm.pdf(x) * float(true_density_ratio(task, x, c)),
                              -np.inf, np.inf, epsabs=1e-12)
    return float(value)


def main():
    ap = argparse.ArgumentParser(description="Brute-force oracle values for the synthetic tasks")
    ap.add_argument("--rho", type=float, default=0.8)
    ap.add_argument("--table", default="[[0.4, 0.1], [0.1, 0.4]]", help="discrete joint table as JSON")
    args = ap.parse_args()

    table = json.loads(args.table)
    discrete = DiscreteJointTask(table=table)
    gaussian = GaussianPairTask(dim=1, rho=args.rho)
    out = {
        "discrete_mi_summation": discrete_mi_by_summation(table),
        "discrete_mi_closed_form": true_mi(discrete),
        "gaussian_mi_quadrature": gaussian_mi_by_quadrature(args.rho),
        "gaussian_mi_closed_form": true_mi(gaussian),
        "gaussian_ratio_integral_c=0.7": ratio_normalisation(args.rho, 0.7),
    }
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
