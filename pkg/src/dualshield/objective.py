"""Trajectory scoring: performance terms plus HJ (or distance) safety guidance.

All cost functions broadcast over leading axes; the planner evaluates a
``(B, N+1, 4)`` state batch in one pass.  A trajectory's cost sums the
pairs ``(x_k, u_k)`` for ``k = 0 .. N-1``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
from numba import njit

from .dynamics import Trajectory, forward_equivalent, relative_state, wrap_angle
from .grid import ValueFunction

logger = logging.getLogger(__name__)

GUIDANCE_MODES = ("hj", "distance")


@dataclass
class ObjectiveWeights:
    Q: tuple = (0.0, 20.0, 5.0, 1.0)
    w_goal: float = 1.0
    w_reg: float = 1.0
    gamma_turn: float = 50.0
    gamma_b: float = 20.0
    gamma_spin: float = 1.0
    c_v: float = 5.0
    y_min: float = -1.5
    y_max: float = 1.5
    gamma: float = 10.0
    lambda_s: float = 1.0
    distance_margin: float = 0.1

    def __post_init__(self):
        self.Q = tuple(float(q) for q in self.Q)
        if len(self.Q) != 4:
            raise ValueError("Q needs four state weights")
        scalars = [getattr(self, f.name) for f in fields(self) if f.name not in ("Q", "y_min", "y_max")]
        if min(self.Q) < 0 or min(scalars) < 0:
            raise ValueError("objective weights must be non-negative")
        if not self.y_min < self.y_max:
            raise ValueError("y_min must be below y_max")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["Q"] = list(self.Q)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown objective weights: {sorted(unknown)}")
        return cls(**d)


def goal_cost(s, goal, Q) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    goal = np.asarray(goal, dtype=float)
    err = s - goal
    err[..., 2] = wrap_angle(err[..., 2])
    return np.sum(np.asarray(Q) * err**2, axis=-1)


def rule_cost(s, w: ObjectiveWeights) -> np.ndarray:
    """Penalise sitting in the upper half-plane while heading +x."""
    s = np.asarray(s, dtype=float)
    return w.gamma_turn * np.maximum(0.0, s[..., 1]) * np.maximum(0.0, np.cos(s[..., 2]))


def boundary_cost(s, w: ObjectiveWeights) -> np.ndarray:
    y = np.asarray(s, dtype=float)[..., 1]
    return w.gamma_b * (np.maximum(0.0, y - w.y_max) ** 2 + np.maximum(0.0, w.y_min - y) ** 2)


def spin_cost(s, u, w: ObjectiveWeights) -> np.ndarray:
    """Steering while (nearly) stationary."""
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    return w.gamma_spin * u[..., 0] ** 2 * np.exp(-w.c_v * s[..., 3] ** 2)


@dataclass
class ValueFunctionSet:
    """The pairwise HV game value and the static-obstacle value."""

    hv: Optional[ValueFunction] = None
    static: Optional[ValueFunction] = None

    def hv_value(self, ego, hv):
        if self.hv is None:
            raise LookupError("HV value function not loaded")
        xr = relative_state(ego, hv)
        vmax = self.hv.spec.axes[4].hi
        if logger.isEnabledFor(logging.DEBUG) and np.any(xr[..., 4] > vmax):
            logger.debug("HV speed above grid maximum %.2f; clamped for lookup", vmax)
        return self.hv.interpolate(xr)

    def static_value(self, ego, centers):
        if self.static is None:
            raise LookupError("static-obstacle value function not loaded")
        return self.static.interpolate(static_relative(ego, centers))


def static_relative(ego, centers) -> np.ndarray:
    """Obstacle centre in the ego body frame plus ego speed: ``(p_xr, p_yr, v)``."""
    ego = np.asarray(ego, dtype=float)
    centers = np.asarray(centers, dtype=float)
    dx = centers[..., 0] - ego[..., 0]
    dy = centers[..., 1] - ego[..., 1]
    c, s = np.cos(ego[..., 2]), np.sin(ego[..., 2])
    return np.stack(np.broadcast_arrays(c * dx + s * dy, -s * dx + c * dy, ego[..., 3]), axis=-1)


@njit(cache=True)
def _k_nearest(pos, centers, k):
    n = pos.shape[0]
    m = centers.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    best = np.empty(k)
    for p in range(n):
        filled = 0
        for c in range(m):
            dx = pos[p, 0] - centers[c, 0]
            dy = pos[p, 1] - centers[c, 1]
            d2 = dx * dx + dy * dy
            if filled == k and d2 >= best[k - 1]:
                continue
            # insertion keeps the lower index first on ties
            slot = filled if filled < k else k - 1
            while slot > 0 and best[slot - 1] > d2:
                if slot < k:
                    best[slot] = best[slot - 1]
                    out[p, slot] = out[p, slot - 1]
                slot -= 1
            best[slot] = d2
            out[p, slot] = c
            if filled < k:
                filled += 1
    return out


def nearest_statics(positions, centers, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest static centres for each position, nearest first.

    Ties go to the lower index.
    """
    positions = np.asarray(positions, dtype=float)
    centers = np.ascontiguousarray(np.asarray(centers, dtype=float).reshape(-1, 2))
    k = min(int(k), len(centers))
    flat = np.ascontiguousarray(positions[..., :2].reshape(-1, 2))
    return _k_nearest(flat, centers, k).reshape(positions.shape[:-1] + (k,))


def constant_velocity_prediction(hv_states, n_steps: int, dt: float) -> np.ndarray:
    """``(M, n_steps+1, 4)`` straight-line HV forecasts."""
    hv_states = np.asarray(hv_states, dtype=float).reshape(-1, 4)
    t = dt * np.arange(n_steps + 1)
    pred = np.repeat(hv_states[:, None, :], n_steps + 1, axis=1)
    pred[..., 0] += hv_states[:, None, 3] * np.cos(hv_states[:, None, 2]) * t
    pred[..., 1] += hv_states[:, None, 3] * np.sin(hv_states[:, None, 2]) * t
    return pred


@dataclass
class PlanningScene:
    """Everything the cost needs besides the candidate trajectories.

    ``hv_prediction`` is ``(M, K, 4)`` with ``K`` at least the number of
    scored steps; ``statics`` holds obstacle centres ``(S, 2)``.
    """

    goal: np.ndarray
    hv_prediction: np.ndarray = field(default_factory=lambda: np.zeros((0, 1, 4)))
    statics: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    value_fns: Optional[ValueFunctionSet] = None
    num_static: int = 3
    r_s_hv: float = 0.6
    r_s_static: float = 0.4
    footprint_offset: float = 0.0  # > 0: look values up between dual-circle centres

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=float)
        pred = np.asarray(self.hv_prediction, dtype=float)
        if pred.ndim == 2:
            pred = pred[:, None, :]
        self.hv_prediction = pred
        self.statics = np.asarray(self.statics, dtype=float).reshape(-1, 2)


def circle_centres(states, offset: float) -> np.ndarray:
    """Dual-circle centres as pseudo-states ``(..., C, 4)``.

    ``offset = 0`` returns the geometric centre alone (``C = 1``).
    """
    s = np.asarray(states, dtype=float)
    if offset == 0:
        return s[..., None, :]
    d = np.stack([np.cos(s[..., 2]), np.sin(s[..., 2])], axis=-1) * offset
    front, back = s.copy(), s.copy()
    front[..., :2] += d
    back[..., :2] -= d
    return np.stack([front, back], axis=-2)


def min_values(states, scene: PlanningScene) -> np.ndarray:
    """``V_min,k`` per state: worst HV value and worst of the nearest statics.

    ``states`` is ``(..., K, 4)``; returns ``(..., K)`` (``+inf`` with no obstacles).
    Reversing states are looked up through their forward equivalent.  With a
    footprint offset every pair of circle centres is checked and the worst
    pair counts.
    """
    states = forward_equivalent(states)
    n_k = states.shape[-2]
    out = np.full(states.shape[:-1], np.inf)
    ego_c = circle_centres(states, scene.footprint_offset)  # (..., K, C, 4)
    if len(scene.hv_prediction):
        if scene.value_fns is None:
            raise LookupError("value functions required for HJ guidance")
        hv = scene.hv_prediction[:, :n_k, :]
        if hv.shape[1] < n_k:
            raise ValueError("HV prediction shorter than the trajectory")
        hv_c = circle_centres(np.swapaxes(hv, 0, 1), scene.footprint_offset)  # (K, M, C, 4)
        vals = scene.value_fns.hv_value(ego_c[..., :, None, None, :], hv_c[:, None, :, :, :])
        out = np.minimum(out, vals.reshape(vals.shape[:-3] + (-1,)).min(axis=-1))
    if len(scene.statics) and scene.num_static > 0:
        if scene.value_fns is None:
            raise LookupError("value functions required for HJ guidance")
        idx = nearest_statics(states, scene.statics, scene.num_static)
        vals = scene.value_fns.static_value(ego_c[..., :, None, :], scene.statics[idx][..., None, :, :])
        out = np.minimum(out, vals.reshape(vals.shape[:-2] + (-1,)).min(axis=-1))
    return out


def min_distances(states, scene: PlanningScene) -> np.ndarray:
    """Clearance ``dist - r_s`` to the closest HV or static centre per state."""
    states = np.asarray(states, dtype=float)
    n_k = states.shape[-2]
    out = np.full(states.shape[:-1], np.inf)
    if len(scene.hv_prediction):
        hv = np.swapaxes(scene.hv_prediction[:, :n_k, :2], 0, 1)
        d = np.linalg.norm(states[..., None, :2] - hv, axis=-1) - scene.r_s_hv
        out = np.minimum(out, d.min(axis=-1))
    if len(scene.statics):
        d = np.sqrt(np.sum((states[..., None, :2] - scene.statics) ** 2, axis=-1)) - scene.r_s_static
        out = np.minimum(out, d.min(axis=-1))
    return out


def hj_penalty_terms(v_min, w: ObjectiveWeights) -> np.ndarray:
    return w.gamma * np.maximum(-np.asarray(v_min, dtype=float), 0.0)


def distance_penalty_terms(clearance, w: ObjectiveWeights) -> np.ndarray:
    return w.gamma * np.maximum(w.distance_margin - np.asarray(clearance, dtype=float), 0.0)


def performance_costs(states, controls, goal, w: ObjectiveWeights) -> np.ndarray:
    """Per-step ``w_goal J_goal + w_reg J_reg`` for the pairs ``(x_k, u_k)``."""
    x = np.asarray(states, dtype=float)[..., :-1, :]
    u = np.asarray(controls, dtype=float)
    reg = rule_cost(x, w) + boundary_cost(x, w) + spin_cost(x, u, w)
    return w.w_goal * goal_cost(x, goal, w.Q) + w.w_reg * reg


def safety_penalty(states, scene: PlanningScene, w: ObjectiveWeights, guidance: str = "hj") -> np.ndarray:
    """``lambda_s * sum_k L(.)`` over ``k = 0..N-1`` of a ``(..., N+1, 4)`` batch."""
    if guidance not in GUIDANCE_MODES:
        raise ValueError(f"guidance must be one of {GUIDANCE_MODES}, got {guidance!r}")
    x = np.asarray(states, dtype=float)[..., :-1, :]
    if guidance == "hj":
        terms = hj_penalty_terms(min_values(x, scene), w)
    else:
        terms = distance_penalty_terms(min_distances(x, scene), w)
    return w.lambda_s * terms.sum(axis=-1)


def trajectory_costs(states, controls, scene: PlanningScene, w: ObjectiveWeights, guidance: str = "hj") -> np.ndarray:
    """Total cost for each trajectory in a batch."""
    perf = performance_costs(states, controls, scene.goal, w).sum(axis=-1)
    return perf + safety_penalty(states, scene, w, guidance)


def total_cost(traj: Trajectory, scene: PlanningScene, w: ObjectiveWeights, guidance: str = "hj") -> float:
    return float(trajectory_costs(traj.states, traj.controls, scene, w, guidance))
