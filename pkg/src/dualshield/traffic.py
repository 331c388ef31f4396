"""Human-driven vehicle behaviour: IDM car following and lane tracking."""
from __future__ import annotations

from dataclasses import dataclass, fields
from enum import Enum

import numpy as np

from .dynamics import HV_BOUNDS, ControlBounds, wrap_angle

ADVERSARIAL_SPEED_CAP = 4.0
VEHICLE_LENGTH = 1.0


class BehaviorMode(str, Enum):
    COOPERATIVE = "cooperative"
    OBLIVIOUS = "oblivious"
    ADVERSARIAL = "adversarial"


@dataclass
class IdmParams:
    v0: float = 1.0
    T: float = 1.0
    s0: float = 0.5
    a_max: float = 1.0
    b: float = 1.5
    delta: float = 4.0

    def __post_init__(self):
        if min(self.v0, self.T, self.s0, self.a_max, self.b, self.delta) <= 0:
            raise ValueError("IDM parameters must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class LanePath:
    """Directed polyline the HV follows."""

    def __init__(self, waypoints, width: float = 1.5):
        pts = np.asarray(waypoints, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("lane needs at least two 2-d waypoints")
        seg = np.diff(pts, axis=0)
        lengths = np.linalg.norm(seg, axis=1)
        if np.any(lengths == 0):
            raise ValueError("consecutive lane waypoints must be distinct")
        self.waypoints = pts
        self.width = float(width)
        self._seg = seg
        self._len = lengths
        self._dir = seg / lengths[:, None]
        self._station = np.concatenate([[0.0], np.cumsum(lengths)])

    @property
    def length(self) -> float:
        return float(self._station[-1])

    def project(self, p):
        """Return ``(station, signed lateral offset, heading)`` of the closest point.

        Positive offsets lie to the left of the travel direction.  Stations
        extend linearly past either end.
        """
        p = np.asarray(p, dtype=float)[:2]
        rel = p - self.waypoints[:-1]
        t = np.einsum("ij,ij->i", rel, self._dir)
        tc = np.clip(t, 0.0, self._len)
        closest = self.waypoints[:-1] + tc[:, None] * self._dir
        d2 = np.sum((p - closest) ** 2, axis=1)
        i = int(np.argmin(d2))
        along = t[i] if (i == 0 and t[i] < 0) or (i == len(self._len) - 1 and t[i] > self._len[i]) else tc[i]
        lat = self._dir[i, 0] * rel[i, 1] - self._dir[i, 1] * rel[i, 0]
        return float(self._station[i] + along), float(lat), float(np.arctan2(self._dir[i, 1], self._dir[i, 0]))

    def point_at(self, s: float) -> np.ndarray:
        if s <= 0:
            return self.waypoints[0] + s * self._dir[0]
        if s >= self.length:
            return self.waypoints[-1] + (s - self.length) * self._dir[-1]
        i = int(np.searchsorted(self._station, s, side="right") - 1)
        return self.waypoints[i] + (s - self._station[i]) * self._dir[i]

    def to_dict(self) -> dict:
        return {"waypoints": self.waypoints.tolist(), "width": self.width}


def idm_acceleration(gap: float, v: float, v_lead: float, p: IdmParams, bounds: ControlBounds = HV_BOUNDS) -> float:
    """Intelligent-driver acceleration, clamped to the HV box."""
    dv = v - v_lead
    s_star = p.s0 + v * p.T + v * dv / (2.0 * np.sqrt(p.a_max * p.b))
    interaction = 0.0 if np.isinf(gap) else (max(s_star, 0.0) / max(gap, 1e-3)) ** 2
    acc = p.a_max * (1.0 - (max(v, 0.0) / p.v0) ** p.delta - interaction)
    return float(np.clip(acc, bounds.a_min, bounds.a_max))


def pure_pursuit(state, lane: LanePath, bounds: ControlBounds = HV_BOUNDS) -> float:
    """Yaw rate toward a look-ahead point ``max(0.5, 0.8 v)`` down the lane."""
    x, y, th, v = np.asarray(state, dtype=float)
    lookahead = max(0.5, 0.8 * abs(v))
    s, _, _ = lane.project((x, y))
    target = lane.point_at(s + lookahead)
    alpha = wrap_angle(np.arctan2(target[1] - y, target[0] - x) - th)
    dist = np.hypot(target[0] - x, target[1] - y)
    w = 2.0 * v * np.sin(alpha) / max(dist, 1e-6)
    return float(np.clip(w, bounds.w_min, bounds.w_max))


def ego_leads(hv, ego, lane: LanePath):
    """Gap to the ego if it sits ahead in the HV's lane corridor, else ``None``."""
    s_h, _, heading = lane.project(hv[:2])
    s_e, lat_e, _ = lane.project(ego[:2])
    if s_e > s_h and abs(lat_e) < lane.width / 2:
        return s_e - s_h - VEHICLE_LENGTH, max(0.0, ego[3] * np.cos(ego[2] - heading))
    return None


def hv_policy(hv, mode: BehaviorMode, ego, lane: LanePath, p: IdmParams, v_ref: float,
              dt: float = 0.1, bounds: ControlBounds = HV_BOUNDS) -> np.ndarray:
    """Control ``(w_h, a_h)`` for one HV.

    ``v_ref`` is the HV's initial (lane-following) speed.  The adversarial
    mode never reads the ego state.
    """
    hv = np.asarray(hv, dtype=float)
    mode = BehaviorMode(mode)
    w = pure_pursuit(hv, lane, bounds)
    v = hv[3]
    if mode is BehaviorMode.COOPERATIVE:
        lead = ego_leads(hv, np.asarray(ego, dtype=float), lane)
        gap, v_lead = (np.inf, v) if lead is None else lead
        a = idm_acceleration(gap, v, v_lead, p, bounds)
    elif mode is BehaviorMode.OBLIVIOUS:
        a = float(np.clip(1.0 * (v_ref - v), bounds.a_min, bounds.a_max))
    else:
        # full throttle until the cap, without overshooting it in one step
        a = float(np.clip((ADVERSARIAL_SPEED_CAP - v) / dt, 0.0, bounds.a_max))
    return np.array([w, a])
