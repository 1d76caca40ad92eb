import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tlsloss import stm
from tlsloss.units import CONSTANTS, ResonatorContext, TlsSpecies


@pytest.fixture(scope="session")
def kernel_table():
    """Shared passage-kernel table; built once per session (~10 s)."""
    return stm.default_kernel_table()


@pytest.fixture(scope="session")
def paper_ctx():
    return ResonatorContext(omega0=2.0 * math.pi * 5.1e9,
                            rel_permittivity=11.5, volume=2925e-18,
                            temperature=0.02)


@pytest.fixture(scope="session")
def paper_species():
    return TlsSpecies(dipole=11.0 * CONSTANTS.debye, gamma1_max=5.7e6)


@pytest.fixture(scope="session")
def paper_ensemble(paper_species):
    return stm.StmEnsemble(species=paper_species, tan_delta0=1.6e-4, n_c=3.7)
