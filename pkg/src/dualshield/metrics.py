"""Per-trial evaluation metrics."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .dynamics import wrap_angle

SUCCESS_HOLD = 5
LATERAL_TOL = 0.2
HEADING_TOL = np.pi / 3
MIN_SPEED = 0.2


def in_goal_band(states, goal) -> np.ndarray:
    """Lane-keeping condition per state: lateral, heading and speed tests."""
    s = np.asarray(states, dtype=float)
    goal = np.asarray(goal, dtype=float)
    lateral = np.abs(s[..., 1] - goal[1]) <= LATERAL_TOL
    heading = np.abs(wrap_angle(s[..., 2] - goal[2])) <= HEADING_TOL
    moving = np.abs(s[..., 3]) >= MIN_SPEED
    return lateral & heading & moving


def detect_success(states, goal, dt: float, hold: int = SUCCESS_HOLD) -> tuple[bool, Optional[float]]:
    """First onset of ``hold`` consecutive in-band samples; ``T_m = onset * dt``."""
    ok = in_goal_band(states, goal)
    run = 0
    for k, flag in enumerate(ok):
        run = run + 1 if flag else 0
        if run == hold:
            return True, (k - hold + 1) * dt
    return False, None


def collision_and_distance(ego_states, others, statics, footprint, static_radius: float = 0.1):
    """Minimum dual-circle clearance over all steps and whether it is ``<= 0``.

    ``others`` is ``(M, K, 4)`` (same time base as the ego) and ``statics``
    ``(S, 2)``.  Returns ``(collision, l_min)``; ``l_min`` is ``inf`` when
    there is nothing to hit.
    """
    ego = np.asarray(ego_states, dtype=float)
    ego_c = footprint.circles(ego)  # (K, 2, 2)
    l_min = np.inf
    others = np.asarray(others, dtype=float).reshape(-1, ego.shape[0], 4)
    if len(others):
        oc = footprint.circles(others)  # (M, K, 2, 2)
        d = np.linalg.norm(ego_c[None, :, :, None, :] - oc[:, :, None, :, :], axis=-1)
        l_min = min(l_min, float(d.min()) - 2.0 * footprint.radius)
    statics = np.asarray(statics, dtype=float).reshape(-1, 2)
    if len(statics):
        d = np.linalg.norm(ego_c[:, :, None, :] - statics[None, None], axis=-1)
        l_min = min(l_min, float(d.min()) - footprint.radius - static_radius)
    return bool(l_min <= 0.0), l_min


def jerk_metric(accelerations, dt: float) -> float:
    """Mean ``|a_k - a_{k-1}| / dt`` over executed accelerations."""
    a = np.asarray(accelerations, dtype=float)
    if a.size < 2:
        return 0.0
    return float(np.mean(np.abs(np.diff(a))) / dt)
