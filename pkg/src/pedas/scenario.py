"""Driving environment: route geometry, speed limits, SPaT schedules, stop signs
and the preceding-vehicle trace.

All quantities are SI (m, s, m/s, rad, 1/m). Scenarios are immutable once built
and validated, so a single instance can be shared between concurrent runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np


class ScenarioError(ValueError):
    """Base class for scenario ingestion failures."""


class ScenarioParseError(ScenarioError):
    """The file is not well-formed JSON or misses required keys."""


class ScenarioValidationError(ScenarioError):
    """A type invariant is breached. ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class Phase(str, Enum):
    GREEN = "Green"
    RED = "Red"


@dataclass(frozen=True)
class LimitSegment:
    start_m: float
    end_m: float
    v_min: float
    v_max: float
    tag: str = ""


@dataclass(frozen=True)
class RouteProfile:
    length_m: float
    elevation: Tuple[Tuple[float, float], ...] = ()  # (position_m, grade angle rad)
    curvature: Tuple[Tuple[float, float], ...] = ()  # (position_m, kappa 1/m)
    limits: Tuple[LimitSegment, ...] = ()

    def __post_init__(self):
        _check(self.length_m > 0, "route.length_m", "must be positive")
        for name, samples in (("elevation", self.elevation), ("curvature", self.curvature)):
            pos = [p for p, _ in samples]
            for i, p in enumerate(pos):
                _check(0.0 <= p <= self.length_m, f"route.{name}[{i}]", "position outside route")
            for i in range(1, len(pos)):
                _check(pos[i] > pos[i - 1], f"route.{name}[{i}]", "positions must be strictly increasing")
        for i, (_, k) in enumerate(self.curvature):
            _check(k >= 0.0, f"route.curvature[{i}]", "curvature must be >= 0")
        _check(len(self.limits) > 0, "route.limits", "at least one limit segment required")
        segs = self.limits
        for i, seg in enumerate(segs):
            _check(seg.end_m > seg.start_m, f"route.limits[{i}]", "end_m must exceed start_m")
            _check(0.0 <= seg.v_min <= seg.v_max, f"route.limits[{i}]", "need 0 <= v_min <= v_max")
        _check(segs[0].start_m == 0.0, "route.limits[0].start_m", "first segment must start at 0")
        for i in range(1, len(segs)):
            prev, cur = segs[i - 1], segs[i]
            if cur.start_m < prev.end_m:
                raise ScenarioValidationError(
                    f"route.limits[{i}]",
                    f"segment [{cur.start_m}, {cur.end_m}] overlaps segment "
                    f"limits[{i - 1}] [{prev.start_m}, {prev.end_m}]",
                )
            _check(cur.start_m == prev.end_m, f"route.limits[{i}].start_m",
                   f"gap after limits[{i - 1}] (ends {prev.end_m})")
        _check(segs[-1].end_m == self.length_m, f"route.limits[{len(segs) - 1}].end_m",
               "last segment must end at route length")

    def grade_at(self, s):
        """Grade angle at ``s`` (piecewise-linear between samples, held at the ends)."""
        if not self.elevation:
            return np.zeros_like(np.asarray(s, dtype=float)) if np.ndim(s) else 0.0
        pos, val = zip(*self.elevation)
        return np.interp(s, pos, val) if np.ndim(s) else float(np.interp(s, pos, val))

    def curvature_at(self, s):
        if not self.curvature:
            return np.zeros_like(np.asarray(s, dtype=float)) if np.ndim(s) else 0.0
        pos, val = zip(*self.curvature)
        return np.interp(s, pos, val) if np.ndim(s) else float(np.interp(s, pos, val))

    def segment_index(self, s: float) -> int:
        starts = [seg.start_m for seg in self.limits]
        return max(0, int(np.searchsorted(starts, s, side="right")) - 1)


@dataclass(frozen=True)
class TrafficSignal:
    position_m: float
    cycle: Tuple[Tuple[Phase, float], ...]
    cycle_offset_s: float = 0.0
    stop_line_offset_m: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "cycle", tuple((Phase(p), float(d)) for p, d in self.cycle))
        for i, (_, d) in enumerate(self.cycle):
            _check(d > 0, f"cycle[{i}]", "phase durations must be > 0")
        phases = {p for p, _ in self.cycle}
        _check(Phase.GREEN in phases and Phase.RED in phases, "cycle",
               "needs at least one Green and one Red phase")
        _check(self.stop_line_offset_m >= 0, "stop_line_offset_m", "must be >= 0")

    @property
    def period(self) -> float:
        return sum(d for _, d in self.cycle)


@dataclass(frozen=True)
class StopSign:
    position_m: float
    dwell_s: float = 3.0
    stop_line_offset_m: float = 5.0

    def __post_init__(self):
        _check(self.dwell_s > 0, "dwell_s", "must be > 0")
        _check(self.stop_line_offset_m >= 0, "stop_line_offset_m", "must be >= 0")


@dataclass(frozen=True)
class PrecedingTrace:
    """Recorded lead vehicle. Position is the rear bumper along the route."""

    samples: Tuple[Tuple[float, float, float], ...]  # (time_s, position_m, velocity_mps)
    entry_time_s: Optional[float] = None
    exit_time_s: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(tuple(map(float, r)) for r in self.samples))
        _check(len(self.samples) >= 2, "preceding.samples", "need at least two samples")
        for i in range(len(self.samples)):
            t, p, v = self.samples[i]
            _check(v >= 0, f"preceding.samples[{i}]", "velocity must be >= 0")
            if i:
                tp, pp, _ = self.samples[i - 1]
                _check(t > tp, f"preceding.samples[{i}]", "time must be strictly increasing")
                _check(p >= pp, f"preceding.samples[{i}]", "position must be non-decreasing")
        arr = np.asarray(self.samples)
        object.__setattr__(self, "_arr", arr)

    @property
    def t_first(self) -> float:
        return self.samples[0][0] if self.entry_time_s is None else max(self.entry_time_s, self.samples[0][0])

    @property
    def t_last(self) -> float:
        return self.samples[-1][0] if self.exit_time_s is None else min(self.exit_time_s, self.samples[-1][0])

    def state_at(self, t: float) -> Optional[Tuple[float, float]]:
        """Lead (position, velocity) at ``t`` or None when outside sensor presence."""
        if t < self.t_first or t > self.t_last:
            return None
        arr = self._arr
        return float(np.interp(t, arr[:, 0], arr[:, 1])), float(np.interp(t, arr[:, 0], arr[:, 2]))


ItsFeature = Union[TrafficSignal, StopSign]


@dataclass(frozen=True)
class Scenario:
    route: RouteProfile
    signals: Tuple[TrafficSignal, ...] = ()
    stop_signs: Tuple[StopSign, ...] = ()
    preceding: Optional[PrecedingTrace] = None
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "signals", tuple(self.signals))
        object.__setattr__(self, "stop_signs", tuple(self.stop_signs))
        L = self.route.length_m
        for name, feats in (("signals", self.signals), ("stop_signs", self.stop_signs)):
            for i, f in enumerate(feats):
                _check(0.0 <= f.position_m <= L, f"{name}[{i}].position_m", "outside route")
                if i:
                    _check(f.position_m >= feats[i - 1].position_m, f"{name}[{i}].position_m",
                           "features must be sorted by position")
        # merged feature list for lookups, signals first on exact ties
        feats = sorted([(f.position_m, 0, i, f) for i, f in enumerate(self.signals)]
                       + [(f.position_m, 1, i, f) for i, f in enumerate(self.stop_signs)],
                       key=lambda r: r[:3])
        object.__setattr__(self, "_features", tuple(r[3] for r in feats))
        object.__setattr__(self, "_feature_pos", np.array([r[0] for r in feats], dtype=float))

    @property
    def features(self) -> Tuple[ItsFeature, ...]:
        return self._features

    def segment_tags(self) -> Tuple[str, ...]:
        tags = []
        for seg in self.route.limits:
            if seg.tag and seg.tag not in tags:
                tags.append(seg.tag)
        return tuple(tags)


def _check(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ScenarioValidationError(path, message)


# -- queries ------------------------------------------------------------------

def speed_limits_at(scenario: Scenario, s: float) -> Tuple[float, float]:
    """Static (v_min, v_max) at ``s``; a shared boundary belongs to the later segment."""
    route = scenario.route
    if not (0.0 <= s <= route.length_m):
        raise ValueError(f"position {s} outside route [0, {route.length_m}]")
    seg = route.limits[route.segment_index(s)]
    return seg.v_min, seg.v_max


def curvature_speed_cap(kappa: float, a_lat_max: float = 2.0) -> float:
    """Highest speed keeping lateral acceleration v^2*kappa below ``a_lat_max``."""
    if kappa < 0 or a_lat_max <= 0:
        raise ValueError("need kappa >= 0 and a_lat_max > 0")
    if kappa == 0:
        return math.inf
    return math.sqrt(a_lat_max / kappa)


def signal_phase_at(signal: TrafficSignal, t: float) -> Tuple[Phase, float]:
    """Active phase at ``t`` and the time left in it. Phase boundaries start the next phase."""
    if t < 0:
        raise ValueError("t must be >= 0")
    tau = (t - signal.cycle_offset_s) % signal.period
    acc = 0.0
    for phase, dur in signal.cycle:
        acc += dur
        if tau < acc:
            return phase, acc - tau
    # tau rounded up to the period: wrap to the first phase
    phase, dur = signal.cycle[0]
    return phase, dur


def green_windows(signal: TrafficSignal, t: float, horizon_s: float = 300.0) -> list:
    """Green windows ``(g, r)`` relative to ``t`` that open within ``horizon_s``.

    ``g`` is the green start (0 when green now) and ``r`` the start of the
    following red. Consecutive green phases are merged into one window.
    """
    phase, remaining = signal_phase_at(signal, t)
    tau = (t - signal.cycle_offset_s) % signal.period
    acc, idx = 0.0, 0
    for idx, (_, dur) in enumerate(signal.cycle):
        acc += dur
        if tau < acc:
            break
    n = len(signal.cycle)
    windows = []
    g = 0.0 if phase is Phase.GREEN else None
    clock = remaining
    while True:
        idx = (idx + 1) % n
        ph, dur = signal.cycle[idx]
        if ph is Phase.GREEN:
            if g is None:
                if clock > horizon_s:
                    break
                g = clock
        elif g is not None:
            windows.append((g, clock))
            g = None
        clock += dur
    return windows


def next_its_feature(scenario: Scenario, s: float, skip: Sequence[ItsFeature] = ()
                     ) -> Optional[Tuple[ItsFeature, float]]:
    """Nearest signal or stop sign strictly ahead of ``s`` and its distance.

    Features listed in ``skip`` (compared by identity) are ignored, which lets the
    simulator retire a stop sign once its dwell has been served.
    """
    if not (0.0 <= s <= scenario.route.length_m):
        raise ValueError(f"position {s} outside route")
    pos = scenario._feature_pos
    i = int(np.searchsorted(pos, s, side="right"))
    skip_ids = {id(f) for f in skip}
    for f in scenario.features[i:]:
        if id(f) not in skip_ids:
            return f, f.position_m - s
    return None


# -- (de)serialisation ---------------------------------------------------------

def scenario_from_dict(doc: dict) -> Scenario:
    try:
        r = doc["route"]
        route = RouteProfile(
            length_m=float(r["length_m"]),
            elevation=tuple((float(p), float(v)) for p, v in r.get("elevation", [])),
            curvature=tuple((float(p), float(v)) for p, v in r.get("curvature", [])),
            limits=tuple(
                LimitSegment(float(x["start_m"]), float(x["end_m"]), float(x["v_min"]),
                             float(x["v_max"]), str(x.get("tag", "")))
                for x in r["limits"]
            ),
        )
        signals = []
        for i, x in enumerate(doc.get("signals", [])):
            try:
                signals.append(TrafficSignal(
                    position_m=float(x["position_m"]),
                    cycle=tuple((Phase(p), float(d)) for p, d in x["cycle"]),
                    cycle_offset_s=float(x.get("cycle_offset_s", 0.0)),
                    stop_line_offset_m=float(x.get("stop_line_offset_m", 5.0)),
                ))
            except ScenarioValidationError as e:
                raise ScenarioValidationError(f"signals[{i}].{e.path}", str(e).split(": ", 1)[1]) from None
        stops = []
        for i, x in enumerate(doc.get("stop_signs", [])):
            try:
                stops.append(StopSign(
                    position_m=float(x["position_m"]),
                    dwell_s=float(x.get("dwell_s", 3.0)),
                    stop_line_offset_m=float(x.get("stop_line_offset_m", 5.0)),
                ))
            except ScenarioValidationError as e:
                raise ScenarioValidationError(f"stop_signs[{i}].{e.path}", str(e).split(": ", 1)[1]) from None
        pre = doc.get("preceding")
        preceding = None
        if pre is not None:
            preceding = PrecedingTrace(
                samples=tuple(tuple(row) for row in pre["samples"]),
                entry_time_s=pre.get("entry_time_s"),
                exit_time_s=pre.get("exit_time_s"),
            )
    except ScenarioValidationError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ScenarioParseError(f"malformed scenario document: {e!r}") from e
    return Scenario(route=route, signals=tuple(signals), stop_signs=tuple(stops),
                    preceding=preceding, label=str(doc.get("label", "")))


def scenario_to_dict(sc: Scenario) -> dict:
    r = sc.route
    return {
        "label": sc.label,
        "route": {
            "length_m": r.length_m,
            "elevation": [list(x) for x in r.elevation],
            "curvature": [list(x) for x in r.curvature],
            "limits": [
                {"start_m": s.start_m, "end_m": s.end_m, "v_min": s.v_min, "v_max": s.v_max,
                 **({"tag": s.tag} if s.tag else {})}
                for s in r.limits
            ],
        },
        "signals": [
            {"position_m": s.position_m, "cycle": [[p.value, d] for p, d in s.cycle],
             "cycle_offset_s": s.cycle_offset_s, "stop_line_offset_m": s.stop_line_offset_m}
            for s in sc.signals
        ],
        "stop_signs": [
            {"position_m": s.position_m, "dwell_s": s.dwell_s, "stop_line_offset_m": s.stop_line_offset_m}
            for s in sc.stop_signs
        ],
        "preceding": None if sc.preceding is None else {
            "entry_time_s": sc.preceding.entry_time_s,
            "exit_time_s": sc.preceding.exit_time_s,
            "samples": [list(x) for x in sc.preceding.samples],
        },
    }


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ScenarioParseError(f"{path}: {e}") from e
    if not isinstance(doc, dict):
        raise ScenarioParseError(f"{path}: top level must be an object")
    return scenario_from_dict(doc)


def save_scenario(sc: Scenario, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(sc), indent=1) + "\n", encoding="utf-8")
