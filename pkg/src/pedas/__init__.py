"""Eco-driving speed advisories for a BEV driver: MPC control,
with green-wave SPaT planning, a DP reference profile and a closed-loop simulator.
"""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def data_path(name: str) -> Path:
    """Path of a bundled data file (vehicle parameters, configs, scenarios)."""
    return Path(str(resources.files("pedas") / "data" / name))
