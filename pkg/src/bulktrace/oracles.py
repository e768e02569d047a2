"""Closed-form reference solutions used by benchmarks and checks."""

from __future__ import annotations

import numpy as np


def navier_plate_deflection(
    E: float, nu: float, t: float, q: float, a: float, b: float, x: float, y: float,
    alpha_s: float = 1.0, terms: int = 200,
) -> float:
    """Deflection of a simply supported Reissner-Mindlin plate under uniform load.

    The plate occupies ``[0, a] x [0, b]``; ``q`` acts in the positive
    deflection direction. ``terms`` odd indices are summed per direction.
    """
    D = E * t**3 / (12.0 * (1.0 - nu**2))
    G = E / (2.0 * (1.0 + nu))
    m = np.arange(1, 2 * terms, 2, dtype=float)
    M, N = np.meshgrid(m, m, indexing="ij")
    al, be = M * np.pi / a, N * np.pi / b
    k2 = al**2 + be**2
    Wmn = 16.0 * q / (np.pi**2 * M * N * D * k2**2) * (1.0 + D * k2 / (alpha_s * G * t))
    return float(np.sum(Wmn * np.sin(al * x) * np.sin(be * y)))
