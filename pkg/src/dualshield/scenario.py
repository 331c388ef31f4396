"""Scenario configuration: a versioned JSON document, SI units throughout."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .diffusion import PlannerConfig
from .objective import ObjectiveWeights
from .shield import ShieldConfig
from .traffic import BehaviorMode, IdmParams, LanePath

SCENARIO_VERSION = 1
RANDOM = "random"


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario document."""


def _vec(x, n: int, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.shape != (n,) or not np.all(np.isfinite(arr)):
        raise ScenarioError(f"{what} must be {n} finite numbers, got {x!r}")
    return arr


@dataclass
class HvSpec:
    """One human-driven vehicle.

    ``mode`` and ``speed`` may be ``"random"``; they are then drawn per
    trial (mode uniform over the three behaviours, speed uniform in the
    scenario's speed range).
    """

    start: np.ndarray  # (x, y, theta); the speed comes from ``speed``
    lane: LanePath
    mode: str = RANDOM
    speed: object = RANDOM
    idm: dict = field(default_factory=dict)

    def __post_init__(self):
        self.start = _vec(self.start, 3, "HV start pose")
        if self.mode != RANDOM:
            try:
                self.mode = BehaviorMode(self.mode).value
            except ValueError as exc:
                raise ScenarioError(f"unknown behaviour mode {self.mode!r}") from exc
        if self.speed != RANDOM:
            self.speed = float(self.speed)
            if self.speed < 0:
                raise ScenarioError("HV speed must be non-negative")
        try:
            IdmParams(**{"v0": 1.0, **self.idm})
        except TypeError as exc:
            raise ScenarioError(f"bad IDM parameters: {exc}") from exc

    def idm_params(self, v_ref: float) -> IdmParams:
        """IDM with the desired speed defaulting to the initial speed."""
        return IdmParams(**{"v0": max(v_ref, 1e-3), **self.idm})

    def to_dict(self) -> dict:
        return {"start": self.start.tolist(), "lane": self.lane.to_dict(), "mode": self.mode,
                "speed": self.speed, "idm": dict(self.idm)}

    @classmethod
    def from_dict(cls, d: dict) -> "HvSpec":
        lane = d.get("lane")
        if not isinstance(lane, dict) or "waypoints" not in lane:
            raise ScenarioError("HV entry needs lane.waypoints")
        try:
            path = LanePath(lane["waypoints"], lane.get("width", 1.5))
        except ValueError as exc:
            raise ScenarioError(str(exc)) from exc
        return cls(start=d.get("start"), lane=path, mode=d.get("mode", RANDOM), speed=d.get("speed", RANDOM),
                    idm=dict(d.get("idm", {})))


@dataclass
class Footprint:
    """Dual-circle vehicle body: two circles on the heading axis."""

    radius: float = 0.3
    offset: float = 0.25

    def circles(self, states) -> np.ndarray:
        """Circle centres ``(..., 2, 2)`` for states ``(..., 4)``."""
        s = np.asarray(states, dtype=float)
        d = np.stack([np.cos(s[..., 2]), np.sin(s[..., 2])], axis=-1) * self.offset
        return np.stack([s[..., :2] + d, s[..., :2] - d], axis=-2)


@dataclass
class ValueFunctionGrids:
    hv_counts: tuple = (50, 50, 32, 5, 5)
    static_counts: tuple = (50, 50, 5)
    t_hj: float = 1.0

    def __post_init__(self):
        self.hv_counts = tuple(int(c) for c in self.hv_counts)
        self.static_counts = tuple(int(c) for c in self.static_counts)
        if len(self.hv_counts) != 5 or len(self.static_counts) != 3 or min(self.hv_counts + self.static_counts) < 2:
            raise ScenarioError("grid counts need 5 (HV) and 3 (static) entries, each at least 2")
        if self.t_hj < 0:
            raise ScenarioError("t_hj must be non-negative")


@dataclass
class Scenario:
    ego_start: np.ndarray
    goal: np.ndarray
    statics: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    static_radius: float = 0.1
    hvs: list = field(default_factory=list)
    y_bounds: tuple = (-1.5, 1.5)
    lane_width: float = 1.5
    hv_speed_range: tuple = (0.5, 2.0)
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    shield: ShieldConfig = field(default_factory=ShieldConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    dt: float = 0.1
    duration: float = 10.0
    footprint: Footprint = field(default_factory=Footprint)
    grids: ValueFunctionGrids = field(default_factory=ValueFunctionGrids)
    name: str = "scenario"
    note: str = ""

    def __post_init__(self):
        self.ego_start = _vec(self.ego_start, 4, "ego start")
        self.goal = _vec(self.goal, 4, "goal")
        self.statics = np.asarray(self.statics, dtype=float).reshape(-1, 2)
        if self.dt <= 0:
            raise ScenarioError("dt must be positive")
        n = self.duration / self.dt
        if self.duration <= 0 or abs(n - round(n)) > 1e-9:
            raise ScenarioError("duration must be a positive multiple of dt")
        lo, hi = self.hv_speed_range
        if not 0 <= lo <= hi:
            raise ScenarioError("hv_speed_range must satisfy 0 <= lo <= hi")
        if abs(self.planner.dt - self.dt) > 1e-12:
            raise ScenarioError("planner dt must equal the simulation dt")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def to_dict(self) -> dict:
        return {
            "version": SCENARIO_VERSION,
            "name": self.name,
            "note": self.note,
            "ego_start": self.ego_start.tolist(),
            "goal": self.goal.tolist(),
            "lane": {"y_bounds": list(self.y_bounds), "width": self.lane_width},
            "statics": {"centers": self.statics.tolist(), "radius": self.static_radius},
            "hvs": [h.to_dict() for h in self.hvs],
            "hv_speed_range": list(self.hv_speed_range),
            "weights": self.weights.to_dict(),
            "shield": self.shield.to_dict(),
            "planner": self.planner.to_dict(),
            "sim": {"dt": self.dt, "duration": self.duration},
            "footprint": {"radius": self.footprint.radius, "offset": self.footprint.offset},
            "grids": {"hv_counts": list(self.grids.hv_counts), "static_counts": list(self.grids.static_counts),
                      "t_hj": self.grids.t_hj},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if not isinstance(d, dict):
            raise ScenarioError("scenario document must be a JSON object")
        if d.get("version") != SCENARIO_VERSION:
            raise ScenarioError(f"unsupported scenario version {d.get('version')!r}")
        try:
            lane = d.get("lane", {})
            statics = d.get("statics", {})
            sim = d.get("sim", {})
            fp = d.get("footprint", {})
            weights = dict(d.get("weights", {}))
            if "y_bounds" in lane:
                weights.setdefault("y_min", lane["y_bounds"][0])
                weights.setdefault("y_max", lane["y_bounds"][1])
            return cls(
                ego_start=d["ego_start"],
                goal=d["goal"],
                statics=statics.get("centers", []),
                static_radius=float(statics.get("radius", 0.1)),
                hvs=[HvSpec.from_dict(h) for h in d.get("hvs", [])],
                y_bounds=tuple(lane.get("y_bounds", (-1.5, 1.5))),
                lane_width=float(lane.get("width", 1.5)),
                hv_speed_range=tuple(d.get("hv_speed_range", (0.5, 2.0))),
                weights=ObjectiveWeights.from_dict(weights),
                shield=ShieldConfig.from_dict(d.get("shield", {})),
                planner=PlannerConfig.from_dict({"dt": float(sim.get("dt", 0.1)), **d.get("planner", {})}),
                dt=float(sim.get("dt", 0.1)),
                duration=float(sim.get("duration", 10.0)),
                footprint=Footprint(float(fp.get("radius", 0.3)), float(fp.get("offset", 0.25))),
                grids=ValueFunctionGrids(**d.get("grids", {})),
                name=str(d.get("name", "scenario")),
                note=str(d.get("note", "")),
            )
        except ScenarioError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"invalid scenario: {exc}") from exc

    def save(self, path) -> None:
        from .grid import atomic_write

        atomic_write(path, json.dumps(self.to_dict(), indent=2) + "\n")


def load_scenario(path: Optional[str] = None) -> Scenario:
    """Read a scenario file; ``None`` loads the shipped default."""
    try:
        if path is None:
            text = resources.files("dualshield").joinpath("data/default_scenario.json").read_text()
        else:
            text = Path(path).read_text()
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario is not valid JSON: {exc}") from exc
    return Scenario.from_dict(doc)


def default_scenario() -> Scenario:
    return load_scenario(None)
