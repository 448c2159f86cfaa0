"""Shooting solver vs direct energy minimization (independent oracle)."""

import pytest

from membrane_forge import sim
from membrane_forge.designs import MembraneDesign
from membrane_forge.material import silicone_params
from oracles import energy_minimization_height


@pytest.mark.parametrize(
    "pressure,force",
    [(0.003, 5.0), (0.0043, 0.0)],
)
def test_height_matches_energy_minimization(ringless_design, silicone,
                                            pressure, force):
    h_solver = sim.solve_shape(ringless_design, silicone, pressure, force).contact_height
    h_oracle = energy_minimization_height(ringless_design, silicone, pressure, force)
    assert abs(h_oracle - h_solver) <= 0.01 * abs(h_solver)
