#!/usr/bin/env python3
"""Derive the bundled 4-bin x 3-material mixing matrix.

Linear attenuation curves mu(E) = rho * (mu/rho)(E) for cortical bone,
soft tissue and elemental iodine are built by log-log interpolation of the
anchor points below (transcribed from the NIST XCOM / Hubbell-Seltzer mass
attenuation tabulations, total attenuation with coherent scattering; values
rounded to three significant figures). Each mixing matrix entry is the
unweighted energy average of mu over one acquisition bin, with the iodine
K edge handled by splitting the integration at the discontinuity.

Writes src/smdk/data/mixing_4bin.smdk and refreshes the matrix block in the
adjacent provenance note. Run from the repository root:

    python scripts/derive_mixing_matrix.py
"""

import sys
from pathlib import Path

import numpy as np

REPO = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO / "src"))

from smdk.core import write_tensor  # noqa: E402

BIN_EDGES_KEV = [16.0, 22.0, 25.0, 28.0, 50.0]
MATERIALS = ["bone", "soft_tissue", "iodine"]

# density g/cm^3 (ICRU-44 cortical bone and soft tissue; elemental iodine)
DENSITY = {"bone": 1.92, "soft_tissue": 1.06, "iodine": 4.93}

# anchor points: energy keV -> mass attenuation coefficient cm^2/g
MASS_ATTENUATION = {
    "bone": [
        (15.0, 9.03), (20.0, 4.00), (25.0, 2.23), (30.0, 1.33),
        (35.0, 0.914), (40.0, 0.666), (45.0, 0.524), (50.0, 0.424), (55.0, 0.366),
    ],
    "soft_tissue": [
        (15.0, 1.70), (20.0, 0.822), (25.0, 0.544), (30.0, 0.379),
        (35.0, 0.310), (40.0, 0.270), (45.0, 0.246), (50.0, 0.227), (55.0, 0.215),
    ],
    # K edge at 33.1694 keV: duplicate energy with below/above values
    "iodine": [
        (15.0, 12.3), (20.0, 5.53), (25.0, 2.97), (30.0, 1.83),
        (33.1694, 1.42), (33.1695, 7.60), (35.0, 6.60), (40.0, 4.69),
        (45.0, 3.49), (50.0, 2.72), (55.0, 2.19),
    ],
}


def mu_of_energy(material: str, energies: np.ndarray) -> np.ndarray:
    """Linear attenuation (1/cm) by piecewise log-log interpolation."""
    table = np.asarray(MASS_ATTENUATION[material])
    log_mu = np.interp(np.log(energies), np.log(table[:, 0]), np.log(table[:, 1]))
    return DENSITY[material] * np.exp(log_mu)


def bin_average(material: str, lo: float, hi: float, samples_per_kev: int = 200) -> float:
    """Unweighted energy average of mu over [lo, hi), split at the iodine K edge."""
    edges = [lo, hi]
    if material == "iodine" and lo < 33.1694 < hi:
        edges = [lo, 33.1694, 33.1695, hi]
    total = 0.0
    for a, b in zip(edges, edges[1:]):
        n = max(2, int((b - a) * samples_per_kev))
        e = np.linspace(a, b, n)
        total += np.trapezoid(mu_of_energy(material, e), e)
    return total / (hi - lo)


def main() -> None:
    matrix = np.array([
        [bin_average(m, lo, hi) for m in MATERIALS]
        for lo, hi in zip(BIN_EDGES_KEV, BIN_EDGES_KEV[1:])
    ])
    out = REPO / "src" / "smdk" / "data" / "mixing_4bin.smdk"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(out, matrix)
    print(f"wrote {out}")
    print(f"bins (keV): {BIN_EDGES_KEV}")
    print(f"columns: {MATERIALS}")
    for row, (lo, hi) in zip(matrix, zip(BIN_EDGES_KEV, BIN_EDGES_KEV[1:])):
        print(f"  [{lo:4.0f},{hi:3.0f}) " + "  ".join(f"{v:8.4f}" for v in row))
    cond = np.linalg.cond(matrix)
    print(f"condition number: {cond:.2f}")


if __name__ == "__main__":
    main()
