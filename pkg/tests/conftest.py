import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from membrane_forge.designs import MembraneDesign, Ring
from membrane_forge.material import silicone_params


@pytest.fixture(scope="session")
def ringless_design():
    # Table-style baseline: 2 mm sheet, 25.4 mm contact pad, no rings.
    return MembraneDesign(contact_radius=25.4, thickness=2.0)


@pytest.fixture(scope="session")
def ringed_design():
    return MembraneDesign(
        contact_radius=25.4,
        thickness=2.0,
        rings=(Ring(49.0, 5.0), Ring(62.0, 5.0)),
    )


@pytest.fixture(scope="session")
def silicone():
    return silicone_params(2.0)
