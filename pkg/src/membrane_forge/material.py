"""Gent strain-energy density for incompressible membranes.

Unit system: lengths in mm, pressures and moduli in MPa, forces in N
(1 MPa * mm^2 = 1 N).  Incompressibility fixes the thickness stretch as
l3 = 1 / (l1 * l2), so the energy density is a function of the in-plane
stretches only:

    W(l1, l2) = -(mu * Jm / 2) * log(1 - (I1 - 3) / Jm)
    I1 = l1^2 + l2^2 + 1 / (l1^2 * l2^2)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

from .errors import ExtensionLimitExceeded

# Reject states this close to the Gent singularity instead of returning inf.
GENT_GUARD = 1e-9


@dataclass(frozen=True)
class MaterialParams:
    """Gent constants plus undeformed sheet thickness.

    mu: shear modulus in MPa, Jm: dimensionless extension limit,
    thickness: undeformed thickness in mm.
    """

    mu: float
    jm: float
    thickness: float

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError(f"shear modulus must be positive, got {self.mu}")
        if self.jm <= 0:
            raise ValueError(f"extension limit Jm must be positive, got {self.jm}")
        if self.thickness <= 0:
            raise ValueError(f"thickness must be positive, got {self.thickness}")


# EcoFlex 00-30 constants fitted from uniaxial testing (31.5 kPa, Jm = 39.6).
ECOFLEX_MU_MPA = 0.0315
ECOFLEX_JM = 39.6


def silicone_params(thickness_mm: float) -> MaterialParams:
    return MaterialParams(mu=ECOFLEX_MU_MPA, jm=ECOFLEX_JM, thickness=thickness_mm)


class GentDerivatives(NamedTuple):
    """First and second partials of W in the principal stretches."""

    w1: float
    w2: float
    w11: float
    w12: float
    w22: float


def _i1(l1: float, l2: float) -> float:
    # grouped so the value is exactly symmetric in (l1, l2)
    return l1 * l1 + l2 * l2 + 1.0 / ((l1 * l1) * (l2 * l2))


def _gent_arg(l1: float, l2: float, mat: MaterialParams) -> float:
    """1 - (I1 - 3)/Jm, raising when at or past the extension limit."""
    if l1 <= 0 or l2 <= 0:
        raise ValueError(f"stretches must be positive, got ({l1}, {l2})")
    a = 1.0 - (_i1(l1, l2) - 3.0) / mat.jm
    if a <= GENT_GUARD:
        raise ExtensionLimitExceeded(
            f"I1 - 3 = {_i1(l1, l2) - 3.0:.6g} at or past Jm = {mat.jm}"
        )
    return a


def gent_energy(l1: float, l2: float, mat: MaterialParams) -> float:
    """Strain energy density W in MPa."""
    return -0.5 * mat.mu * mat.jm * math.log(_gent_arg(l1, l2, mat))


def gent_derivatives(l1: float, l2: float, mat: MaterialParams) -> GentDerivatives:
    """Closed-form partials of gent_energy in (l1, l2).

    With A = 1 - (I1 - 3)/Jm:
      W_i  = (mu/2) * I1_i / A
      W_ij = (mu/2) * (I1_ij / A + I1_i * I1_j / (Jm * A^2))
    """
    a = _gent_arg(l1, l2, mat)
    c1 = l1 * l1 * l1 * l2 * l2  # l1^3 l2^2
    c2 = l1 * l1 * l2 * l2 * l2  # l1^2 l2^3
    i1_1 = 2.0 * l1 - 2.0 / c1
    i1_2 = 2.0 * l2 - 2.0 / c2
    i1_11 = 2.0 + 6.0 / (c1 * l1)
    i1_22 = 2.0 + 6.0 / (c2 * l2)
    i1_12 = 4.0 / (l1 * c2)
    half_mu = 0.5 * mat.mu
    w1 = half_mu * i1_1 / a
    w2 = half_mu * i1_2 / a
    jma2 = mat.jm * a * a
    w11 = half_mu * (i1_11 / a + i1_1 * i1_1 / jma2)
    w22 = half_mu * (i1_22 / a + i1_2 * i1_2 / jma2)
    w12 = half_mu * (i1_12 / a + i1_1 * i1_2 / jma2)
    return GentDerivatives(w1, w2, w11, w12, w22)
