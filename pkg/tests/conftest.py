"""Shared fixtures: bundled vehicle, per-scenario setups and cached closed-loop runs."""

from __future__ import annotations

from functools import lru_cache

import pytest

from pedas import data_path
from pedas.scenario import load_scenario
from pedas.sim import DriverModel, RunMode, prepare, run_simulation
from pedas.vehicle import load_vehicle

SCENARIOS = ("flat_cruise", "stop_sign", "signal_corridor", "car_following", "urban_highway")


@lru_cache(maxsize=None)
def vehicle():
    return load_vehicle(data_path("nissan_leaf_like.json"))


@lru_cache(maxsize=None)
def scenario(name: str):
    return load_scenario(data_path(f"{name}.json"))


@lru_cache(maxsize=None)
def setup(name: str):
    vf = vehicle()
    return prepare(scenario(name), vf.params, vf.coeffs)


@lru_cache(maxsize=None)
def trip(name: str, mode: str, driver: str):
    """Cached closed-loop run; ``driver`` is a style name or ``"ideal"``."""
    st = setup(name)
    drv = DriverModel.ideal(st.mpc_cfg.dT) if driver == "ideal" else DriverModel.for_style(driver)
    return run_simulation(scenario(name), RunMode(mode), drv, st.params, st.coeffs, st.mpc_cfg,
                          st.dp_profile, 0, st.planner_cfg)


@pytest.fixture(scope="session")
def leaf():
    return vehicle()


# -- acceptance summary ------------------------------------------------------------------

ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
