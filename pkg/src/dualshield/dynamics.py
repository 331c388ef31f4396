"""Unicycle vehicle models, body-frame transforms and rollouts.

States are plain ``float64`` arrays whose last axis holds the fields of
:class:`VehicleState` (``p_x, p_y, theta, v``); controls hold ``(w, a)``.
Every function broadcasts over leading axes so the planner can push whole
candidate batches through a single call.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * np.pi


class VehicleState(NamedTuple):
    p_x: float
    p_y: float
    theta: float
    v: float


class Control(NamedTuple):
    w: float
    a: float


class RelativeState(NamedTuple):
    p_xr: float
    p_yr: float
    phi_r: float
    v: float
    v_h: float


@dataclass(frozen=True)
class ControlBounds:
    w_min: float
    w_max: float
    a_min: float
    a_max: float

    def __post_init__(self):
        if not (self.w_min <= self.w_max and self.a_min <= self.a_max):
            raise ValueError(f"empty control box: {self}")

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.w_min, self.a_min])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.w_max, self.a_max])

    def clip(self, u):
        u = np.asarray(u, dtype=float)
        return np.clip(u, self.lo, self.hi)

    def contains(self, u, tol: float = 0.0) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.lo - tol) and np.all(u <= self.hi + tol))

    def to_dict(self) -> dict:
        return {"w_min": self.w_min, "w_max": self.w_max, "a_min": self.a_min, "a_max": self.a_max}

    @classmethod
    def from_dict(cls, d: dict) -> "ControlBounds":
        return cls(float(d["w_min"]), float(d["w_max"]), float(d["a_min"]), float(d["a_max"]))


EGO_BOUNDS = ControlBounds(-np.pi / 3, np.pi / 3, -1.0, 1.0)
HV_BOUNDS = ControlBounds(-np.pi / 18, np.pi / 18, -1.0, 1.0)


def wrap_angle(theta):
    """Wrap to [-pi, pi)."""
    return np.mod(np.asarray(theta, dtype=float) + np.pi, TWO_PI) - np.pi


def wrap_2pi(theta):
    """Wrap to [0, 2pi)."""
    out = np.mod(np.asarray(theta, dtype=float), TWO_PI)
    # mod can round up to exactly 2pi for tiny negative inputs
    return np.where(out >= TWO_PI, 0.0, out)


def ego_derivative(s, u) -> np.ndarray:
    """World-frame unicycle derivative ``(v cos th, v sin th, w, a)``."""
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    th, v = s[..., 2], s[..., 3]
    return np.stack(
        np.broadcast_arrays(v * np.cos(th), v * np.sin(th), u[..., 0], u[..., 1]), axis=-1
    )


def forward_equivalent(states) -> np.ndarray:
    """Map reversing states ``v < 0`` to heading ``theta + pi`` with speed ``-v``.

    A unicycle backing up at ``(theta, v)`` traces the same path as one
    driving forward at ``(theta + pi, -v)`` with the same turn rate and
    negated acceleration.  The control box is symmetric in ``a``, so value
    functions gridded over forward speeds apply to the mapped state.
    """
    s = np.array(states, dtype=float)
    back = s[..., 3] < 0
    s[..., 2] = np.where(back, wrap_angle(s[..., 2] + np.pi), s[..., 2])
    s[..., 3] = np.abs(s[..., 3])
    return s


def relative_state(ego, other) -> np.ndarray:
    """Express ``other`` in the body frame of ``ego``.

    Returns ``(p_xr, p_yr, phi_r, v, v_h)`` with ``phi_r`` in [0, 2pi).
    """
    ego = np.asarray(ego, dtype=float)
    other = np.asarray(other, dtype=float)
    dx = other[..., 0] - ego[..., 0]
    dy = other[..., 1] - ego[..., 1]
    c, s = np.cos(ego[..., 2]), np.sin(ego[..., 2])
    pxr = c * dx + s * dy
    pyr = -s * dx + c * dy
    phi = wrap_2pi(other[..., 2] - ego[..., 2])
    return np.stack(np.broadcast_arrays(pxr, pyr, phi, ego[..., 3], other[..., 3]), axis=-1)


def relative_drift(xr) -> np.ndarray:
    xr = np.asarray(xr, dtype=float)
    z = np.zeros_like(xr[..., 0])
    v, vh, phi = xr[..., 3], xr[..., 4], xr[..., 2]
    return np.stack([-v + vh * np.cos(phi), vh * np.sin(phi), z, z, z], axis=-1)


def relative_ego_jacobian(xr) -> np.ndarray:
    """G_A(x_r), shape ``(..., 5, 2)``."""
    xr = np.asarray(xr, dtype=float)
    g = np.zeros(xr.shape[:-1] + (5, 2))
    g[..., 0, 0] = xr[..., 1]
    g[..., 1, 0] = -xr[..., 0]
    g[..., 2, 0] = -1.0
    g[..., 3, 1] = 1.0
    return g


def relative_hv_jacobian(xr) -> np.ndarray:
    """G_B(x_r), shape ``(..., 5, 2)``; state independent."""
    xr = np.asarray(xr, dtype=float)
    g = np.zeros(xr.shape[:-1] + (5, 2))
    g[..., 2, 0] = 1.0
    g[..., 4, 1] = 1.0
    return g


def relative_derivative(xr, u, uh) -> np.ndarray:
    """Control-affine relative dynamics ``f0 + G_A u + G_B uh``."""
    u = np.asarray(u, dtype=float)
    uh = np.asarray(uh, dtype=float)
    return (
        relative_drift(xr)
        + np.einsum("...ij,...j->...i", relative_ego_jacobian(xr), u)
        + np.einsum("...ij,...j->...i", relative_hv_jacobian(xr), uh)
    )


def euler_step(s, u, dt: float) -> np.ndarray:
    """One explicit Euler step; heading re-wrapped to [-pi, pi)."""
    s = np.asarray(s, dtype=float)
    nxt = s + dt * ego_derivative(s, u)
    nxt[..., 2] = wrap_angle(nxt[..., 2])
    return nxt


@dataclass
class Trajectory:
    states: np.ndarray  # (N+1, 4)
    controls: np.ndarray  # (N, 2), already clamped
    dt: float

    def __len__(self) -> int:
        return len(self.controls)


def rollout_batch(x0, controls, dt: float, bounds: ControlBounds = EGO_BOUNDS):
    """Roll out ``controls`` of shape ``(..., N, 2)`` from ``x0``.

    Returns ``(states, clamped_controls)`` with states shaped ``(..., N+1, 4)``.
    """
    controls = bounds.clip(controls)
    n = controls.shape[-2]
    x0 = np.asarray(x0, dtype=float)
    states = np.empty(controls.shape[:-2] + (n + 1, 4))
    states[..., 0, :] = x0
    for k in range(n):
        states[..., k + 1, :] = euler_step(states[..., k, :], controls[..., k, :], dt)
    return states, controls


def rollout(x0, seq, dt: float, bounds: ControlBounds = EGO_BOUNDS) -> Trajectory:
    """Euler rollout of a single control sequence (``(N, 2)`` or flat ``2N``)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    seq = np.asarray(seq, dtype=float).reshape(-1, 2)
    if len(seq) < 1:
        raise ValueError("control sequence must hold at least one step")
    states, controls = rollout_batch(x0, seq, dt, bounds)
    return Trajectory(states=states, controls=controls, dt=dt)
