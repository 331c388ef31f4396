"""CBVF-QP safety filter.

Each nearby obstacle contributes one robust half-space over ``(w, a)``
built from the interpolated value and its gradient; the filter returns
the control closest to the nominal one that satisfies every half-space,
relaxed by a single heavily weighted slack.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .dynamics import EGO_BOUNDS, ControlBounds, forward_equivalent, relative_state
from .grid import ValueFunction
from .hj_solver import GameModel, _box_extreme, _lin, hv_relative_model, static_obstacle_model
from .objective import ValueFunctionSet, circle_centres, nearest_statics, static_relative


class QPError(RuntimeError):
    pass


@dataclass
class ShieldConfig:
    c_eps: float = 1e8
    gamma_cbf: float = 1.0
    num_static: int = 3
    enabled: bool = True

    def __post_init__(self):
        if self.c_eps <= 0 or self.gamma_cbf <= 0:
            raise ValueError("c_eps and gamma_cbf must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ShieldConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ValueError(f"unknown shield settings: {sorted(set(d) - known)}")
        return cls(**d)


class HalfSpace(NamedTuple):
    """``normal . u + eps >= offset``."""

    normal: np.ndarray
    offset: float


def build_constraint(xr, vf: ValueFunction, model: GameModel, gamma_cbf: float) -> HalfSpace:
    """Robust CBVF condition at relative state ``xr`` as a half-space in ``u``."""
    xr = np.asarray(xr, dtype=float)
    g = vf.gradient(xr)
    value = vf.interpolate(xr)
    coords = [xr[j] for j in range(model.dim)]
    costate = list(g)
    lf = 0.0
    for pj, fj in zip(costate, model.drift(coords)):
        lf += float(pj * fj)
    normal = np.array([float(c) for c in _lin(costate, model.ego_jacobian(coords), model.ego_bounds.shape[1])])
    worst = 0.0
    if model.dist_jacobian is not None:
        worst = float(_box_extreme(_lin(costate, model.dist_jacobian(coords), model.dist_bounds.shape[1]),
                                   model.dist_bounds, take_max=False))
    return HalfSpace(normal=normal, offset=-lf - gamma_cbf * value - worst)


def qp_solve(weights, target, halfspaces: Sequence[HalfSpace], box: ControlBounds, tol: float = 1e-9) -> np.ndarray:
    """Exact active-set enumeration for the 3-variable shield QP.

    Minimises ``sum_i weights_i (z_i - target_i)^2`` over ``z = (w, a, eps)``
    subject to ``n . u + eps >= offset`` for every half-space, the control
    box and ``eps >= 0``.  Active sets of size at most three are tried in
    lexicographic order; the feasible KKT point with the lowest objective
    wins, the first one on ties.
    """
    q = np.asarray(weights, dtype=float)
    t = np.asarray(target, dtype=float)
    rows = [np.array([h.normal[0], h.normal[1], 1.0]) for h in halfspaces]
    rhs = [float(h.offset) for h in halfspaces]
    rows += [np.array(r, dtype=float) for r in ([1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1])]
    rhs += [box.w_min, -box.w_max, box.a_min, -box.a_max, 0.0]
    A = np.array(rows)
    b = np.array(rhs)
    scale = 1.0 + np.abs(b)

    best, best_obj = None, np.inf
    for size in range(4):
        for subset in itertools.combinations(range(len(b)), size):
            if size == 0:
                z = t.copy()
                lam = np.zeros(0)
            else:
                As = A[list(subset)]
                if np.linalg.matrix_rank(As) < size:
                    continue
                try:
                    # null-space method: the heavy slack weight makes the KKT and
                    # Gram-matrix systems too ill-conditioned to solve directly
                    bs = b[list(subset)]
                    z = np.linalg.lstsq(As, bs, rcond=None)[0]
                    if size < 3:
                        N = np.linalg.svd(As)[2][size:].T
                        y = np.linalg.solve((N.T * q) @ N, N.T @ (q * (t - z)))
                        z = z + N @ y
                    lam = np.linalg.lstsq(As.T, 2.0 * q * (z - t), rcond=None)[0]
                except np.linalg.LinAlgError:
                    continue  # degenerate active set; a neighbouring one covers the vertex
            if size and np.any(lam < -tol * (1.0 + np.abs(lam).max())):
                continue
            if np.any(A @ z < b - tol * (scale + np.abs(A) @ np.abs(z))):
                continue
            obj = float(np.sum(q * (z - t) ** 2))
            if size == 0:
                return z  # zero objective: nothing can do better
            if obj < best_obj:
                best, best_obj = z, obj
    if best is None:
        raise QPError("no feasible KKT point found")
    # tiny tolerance-level violations of the box are rounding noise
    best = best.copy()
    best[:2] = box.clip(best[:2])
    best[2] = max(best[2], 0.0)
    return best


class ShieldResult(NamedTuple):
    control: np.ndarray
    slack: float
    active: bool
    record: dict


def _worst(candidates, vf: ValueFunction):
    """Relative state and value of the most threatening circle pair."""
    vals = vf.interpolate(candidates)
    j = int(np.argmin(vals))
    return candidates[j], float(vals[j])


def shield_constraints(ego, hv_states, statics, value_fns: ValueFunctionSet, cfg: ShieldConfig,
                       hv_model: GameModel | None = None, static_model: GameModel | None = None,
                       footprint_offset: float = 0.0):
    """Half-spaces for every HV and the ``num_static`` nearest statics, with their values.

    A reversing ego is checked as its forward equivalent; the acceleration
    column of each half-space is negated to map back to the real control.
    With a footprint offset each obstacle contributes the circle pair with
    the lowest value.
    """
    ego = np.asarray(ego, dtype=float)
    flip = np.array([1.0, -1.0 if ego[3] < 0 else 1.0])
    ego = forward_equivalent(ego)
    hv_model = hv_model or hv_relative_model()
    static_model = static_model or static_obstacle_model()
    ego_c = circle_centres(ego, footprint_offset)  # (C, 4)
    out = []
    for h in np.asarray(hv_states, dtype=float).reshape(-1, 4):
        pairs = relative_state(ego_c[:, None, :], circle_centres(h, footprint_offset)[None, :, :]).reshape(-1, 5)
        xr, v = _worst(pairs, value_fns.hv)
        hs = build_constraint(xr, value_fns.hv, hv_model, cfg.gamma_cbf)
        out.append(("hv", HalfSpace(hs.normal * flip, hs.offset), v))
    statics = np.asarray(statics, dtype=float).reshape(-1, 2)
    if len(statics) and cfg.num_static > 0:
        for j in nearest_statics(ego, statics, cfg.num_static):
            xr, v = _worst(static_relative(ego_c, statics[j]), value_fns.static)
            hs = build_constraint(xr, value_fns.static, static_model, cfg.gamma_cbf)
            out.append((f"static{int(j)}", HalfSpace(hs.normal * flip, hs.offset), v))
    return out


def filter_control(u_nom, ego, hv_states, statics, value_fns: ValueFunctionSet, cfg: ShieldConfig,
                   bounds: ControlBounds = EGO_BOUNDS, footprint_offset: float = 0.0) -> ShieldResult:
    """Minimally modify ``u_nom`` so every robust CBVF half-space holds."""
    u_nom = np.asarray(u_nom, dtype=float)
    if not np.all(np.isfinite(u_nom)):
        raise ValueError("nominal control must be finite")
    cons = shield_constraints(ego, hv_states, statics, value_fns, cfg, footprint_offset=footprint_offset)
    z = qp_solve([1.0, 1.0, cfg.c_eps], [u_nom[0], u_nom[1], 0.0], [c[1] for c in cons], bounds)
    u = z[:2]
    eps = float(z[2])
    active = bool(np.max(np.abs(u - u_nom)) > 1e-9 or eps > 1e-9)
    record = {
        "u_nom": u_nom.tolist(),
        "u_safe": u.tolist(),
        "eps": eps,
        "obstacles": [
            {"id": name, "V": float(v), "slack": float(hs.normal @ u + eps - hs.offset)} for name, hs, v in cons
        ],
    }
    return ShieldResult(u, eps, active, record)


class SafetyShield(BaseEstimator):
    """Estimator facade over :func:`filter_control`.

    ``fit`` takes the value functions; ``predict`` maps a nominal control
    and the current scene to the filtered control.
    """

    def __init__(self, c_eps=1e8, gamma_cbf=1.0, num_static=3, footprint_offset=0.0):
        self.c_eps = c_eps
        self.gamma_cbf = gamma_cbf
        self.num_static = num_static
        self.footprint_offset = footprint_offset

    def fit(self, value_fns: ValueFunctionSet, y=None):
        self.value_fns_ = value_fns
        self.config_ = ShieldConfig(c_eps=self.c_eps, gamma_cbf=self.gamma_cbf, num_static=self.num_static)
        return self

    def filter(self, u_nom, ego, hv_states=(), statics=()) -> ShieldResult:
        return filter_control(u_nom, ego, hv_states, statics, self.value_fns_, self.config_,
                              footprint_offset=self.footprint_offset)

    def predict(self, u_nom, ego, hv_states=(), statics=()) -> np.ndarray:
        return self.filter(u_nom, ego, hv_states, statics).control
