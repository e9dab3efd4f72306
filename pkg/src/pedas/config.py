"""Run configuration files: ``mpc``, ``planner`` and ``dp`` sections of one JSON document."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .mpc import MpcConfig
from .planner import DpConfig, PlannerConfig


@dataclass(frozen=True)
class Configs:
    mpc: MpcConfig = MpcConfig()
    planner: PlannerConfig = PlannerConfig()
    dp: DpConfig = DpConfig()


def _section(cls, doc: Optional[dict], name: str):
    doc = dict(doc or {})
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown keys in '{name}': {sorted(unknown)}")
    return cls(**doc)


def configs_from_dict(doc: dict) -> Configs:
    dp = dict(doc.get("dp") or {})
    grid = dp.get("speed_grid")
    if isinstance(grid, dict):
        dp["speed_grid"] = tuple(np.round(np.arange(grid["start"], grid["stop"] + 0.5 * grid["step"],
                                                    grid["step"]), 6))
    elif grid is not None:
        dp["speed_grid"] = tuple(float(x) for x in grid)
    return Configs(_section(MpcConfig, doc.get("mpc"), "mpc"),
                   _section(PlannerConfig, doc.get("planner"), "planner"),
                   _section(DpConfig, dp, "dp"))


def load_configs(path: Union[str, Path, None]) -> Configs:
    if path is None:
        return Configs()
    return configs_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
