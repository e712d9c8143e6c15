#!/usr/bin/env python3
"""Regenerate the committed degree-5 ln fit used by capskit.fxp.

Interpolates ln(m) at Chebyshev nodes on [1, 2] and prints the coefficients
(highest power first) plus the measured max absolute error. Paste the output
into fxp.LOG_COEFFS if the fit is ever changed.
"""
import numpy as np

DEGREE = 5


def main():
    n = DEGREE + 1
    k = np.arange(n)
    nodes = 1.5 + 0.5 * np.cos((2 * k + 1) * np.pi / (2 * n))
    coeffs = np.polyfit(nodes, np.log(nodes), DEGREE)

    m = np.linspace(1.0, 2.0, 200001)
    err = np.abs(np.polyval(coeffs, m) - np.log(m))
    print("LOG_COEFFS = (")
    for c in coeffs:
        print(f"    {c:.12f},")
    print(")")
    print(f"# max abs error on [1, 2]: {err.max():.3e}")


if __name__ == "__main__":
    main()
