"""Pytest configuration to ensure local workspace 'src' path is prioritized.

This avoids importing an already-installed ipod_assimilation distribution outside the workspace
that may be missing newer functions added during development.
"""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

TESTS_DIR = Path(__file__).resolve().parent
WORKSPACE_ROOT = TESTS_DIR.parent
SRC_DIR = WORKSPACE_ROOT / "src"

if SRC_DIR.exists():
    # Prepend so it takes precedence over any site-packages installed version
    if str(SRC_DIR) not in sys.path:
        sys.path.insert(0, str(SRC_DIR))

    # If a different ipod_assimilation was already imported (e.g., from another src outside workspace), purge it
    for mod_name in list(sys.modules):
        if mod_name.startswith("ipod_assimilation"):
            del sys.modules[mod_name]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def coarse_problem():
    """Small interface problem shared by the assimilation tests."""
    from ipod_assimilation.pde_constraints import assemble_interface_problem

    return assemble_interface_problem(h=0.25, tau=0.1, T=0.5)


@pytest.fixture(scope="session")
def small_burgers():
    from ipod_assimilation.pde_constraints import assemble_burgers_problem

    return assemble_burgers_problem(n_cells=16, tau=0.05, T=0.25, nu=0.1)


@pytest.fixture(scope="session")
def medium_problem():
    """Interface problem at h = 1/10, tau = 1/50 for the gradient checks."""
    from ipod_assimilation.pde_constraints import assemble_interface_problem

    return assemble_interface_problem(h=0.1, tau=0.02, T=1.0)
