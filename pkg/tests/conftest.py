"""Shared fixtures: bundled feeders and configs."""

from pathlib import Path

import numpy as np
import pytest

import gridshaper
from gridshaper import load_config, load_network, load_scenario

DATA = Path(gridshaper.__file__).parent / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def feeder4():
    return load_network(str(DATA / "feeder4.json"))


@pytest.fixture(scope="session")
def feeder12():
    return load_network(str(DATA / "feeder12.json"))


@pytest.fixture(scope="session")
def fast_config():
    return load_config(str(DATA / "fast_config.json"))


@pytest.fixture(scope="session")
def default_config():
    return load_config(str(DATA / "default_config.json"))


@pytest.fixture(scope="session")
def paper_scenario():
    return load_scenario(str(DATA / "paper_tables.json"))


@pytest.fixture(scope="session")
def fast_reference(feeder4, fast_config):
    """Stage-1 reference on the small feeder, shared across tests."""
    return gridshaper.solve_stage1(
        feeder4, fast_config.horizon, fast_config.weights, fast_config.nu_nom
    )


@pytest.fixture()
def fast_state(feeder4, fast_reference):
    return gridshaper.SystemState(e_bat=fast_reference.e_bat_hat[0].copy())


def two_bus(r=0.01, x=0.01, p=0.1, q=0.05, steps=1):
    """Minimal hand-checkable feeder."""
    from gridshaper import Bus, FixedLoadForecast, Line, NetworkModel

    return NetworkModel(
        buses=(Bus(id=1),),
        lines=(Line(0, 1, r, x),),
        v0_sq=1.0,
        v_min_sq=0.9**2,
        v_max_sq=1.05**2,
        forecast=FixedLoadForecast(
            p=np.full((steps, 1), p), q=np.full((steps, 1), q)
        ),
    )
