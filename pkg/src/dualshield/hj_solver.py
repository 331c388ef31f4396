"""Final-value HJI variational inequality on rectilinear grids.

The solver marches backward from ``t = T_hj`` with a first-order upwind /
global Lax-Friedrichs scheme and clamps against the failure margin after
every step, so the returned slice is the min-over-time game payoff.

Models are control affine: ``x' = f0(x) + G_A(x) u + G_B(x) u_h`` with the
ego maximising and the disturbance minimising.  Model callables receive a
list of per-axis coordinate arrays that broadcast against each other and
return nested lists whose entries are arrays or plain ``0.0``; zero
entries are skipped, which keeps memory flat on 5-d grids.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator

from .dynamics import EGO_BOUNDS, HV_BOUNDS, ControlBounds
from .grid import Axis, GridSpec, ValueFunction

logger = logging.getLogger(__name__)


class SolverDivergenceError(RuntimeError):
    def __init__(self, step: int, node: tuple):
        super().__init__(f"non-finite value at step {step}, node {node}")
        self.step = step
        self.node = node


def _circle_margin(r_s: float):
    def margin(coords):
        return coords[0] ** 2 + coords[1] ** 2 - r_s**2

    return margin


@dataclass
class GameModel:
    name: str
    dim: int
    drift: Callable
    ego_jacobian: Callable
    ego_bounds: np.ndarray  # (2, m): rows lo, hi
    dist_jacobian: Optional[Callable] = None
    dist_bounds: Optional[np.ndarray] = None
    r_s: float = 0.6
    failure: Optional[Callable] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ego_bounds = np.asarray(self.ego_bounds, dtype=float)
        if self.dist_bounds is not None:
            self.dist_bounds = np.asarray(self.dist_bounds, dtype=float)
        if self.failure is None:
            self.failure = _circle_margin(self.r_s)

    def margin(self, coords) -> np.ndarray:
        """Failure margin ``l_r``; negative inside the failure set."""
        return self.failure(coords)


def _box(bounds: ControlBounds) -> np.ndarray:
    return np.array([bounds.lo, bounds.hi])


def hv_relative_model(r_s: float = 0.6, ego: ControlBounds = EGO_BOUNDS, hv: ControlBounds = HV_BOUNDS) -> GameModel:
    """5-d ego/HV game over ``(p_xr, p_yr, phi_r, v, v_h)``."""

    def drift(c):
        px, py, phi, v, vh = c
        return [-v + vh * np.cos(phi), vh * np.sin(phi), 0.0, 0.0, 0.0]

    def ego_jac(c):
        px, py = c[0], c[1]
        return [[py, 0.0], [-px, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]

    def hv_jac(c):
        return [[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]]

    return GameModel(
        name="hv5d",
        dim=5,
        drift=drift,
        ego_jacobian=ego_jac,
        ego_bounds=_box(ego),
        dist_jacobian=hv_jac,
        dist_bounds=_box(hv),
        r_s=r_s,
        meta={"ego_bounds": ego.to_dict(), "hv_bounds": hv.to_dict(), "axis_names": ["x_r", "y_r", "phi_r", "v_e", "v_h"]},
    )


def static_obstacle_model(r_s: float = 0.4, ego: ControlBounds = EGO_BOUNDS) -> GameModel:
    """3-d model for a circular static obstacle over ``(p_xr, p_yr, v)``."""

    def drift(c):
        return [-c[2], 0.0, 0.0]

    def ego_jac(c):
        return [[c[1], 0.0], [-c[0], 0.0], [0.0, 1.0]]

    return GameModel(
        name="static3d",
        dim=3,
        drift=drift,
        ego_jacobian=ego_jac,
        ego_bounds=_box(ego),
        r_s=r_s,
        meta={"ego_bounds": ego.to_dict(), "hv_bounds": None, "axis_names": ["x_r", "y_r", "v_e"]},
    )


def stopping_model(a_max: float = 1.0) -> GameModel:
    """Braking toward a wall: ``d' = -v``, ``v' = a``; failure at ``d <= 0``."""

    return GameModel(
        name="stop2d",
        dim=2,
        drift=lambda c: [-c[1], 0.0],
        ego_jacobian=lambda c: [[0.0], [1.0]],
        ego_bounds=np.array([[-a_max], [a_max]]),
        r_s=0.0,
        failure=lambda c: c[0] + 0.0 * c[1],
    )


def stopping_grid(counts=(81, 41)) -> GridSpec:
    """``d`` in [0, 8] m by ``v`` in [0, 4] m/s."""
    return GridSpec.from_bounds((0.0, 0.0), (8.0, 4.0), counts)


def zero_crossings(vf: ValueFunction, axis: int = 0) -> np.ndarray:
    """Per grid line along ``axis`` (2-d grids): first coordinate where ``V`` turns positive.

    Linear interpolation between the bracketing nodes; NaN where the line
    never changes sign.
    """
    vals = np.moveaxis(vf.values, axis, 0)
    nodes = vf.spec.axes[axis].nodes
    out = np.full(vals.shape[1], np.nan)
    for i in range(vals.shape[1]):
        col = vals[:, i]
        pos = np.flatnonzero(col > 0)
        if len(pos) == 0 or pos[0] == 0:
            continue
        k = pos[0]
        a, b = col[k - 1], col[k]
        out[i] = nodes[k - 1] + (nodes[k] - nodes[k - 1]) * (-a) / (b - a)
    return out


def hv_grid(counts=(100, 100, 64, 8, 8)) -> GridSpec:
    lo = (-8.0, -8.0, 0.0, 0.0, 0.0)
    hi = (8.0, 8.0, 2 * np.pi, 4.0, 4.0)
    return GridSpec.from_bounds(lo, hi, counts, periodic=(False, False, True, False, False))


def static_grid(counts=(100, 100, 8)) -> GridSpec:
    return GridSpec.from_bounds((-8.0, -8.0, 0.0), (8.0, 8.0, 4.0), counts)


HV_REDUCED_COUNTS = (50, 50, 32, 5, 5)
STATIC_REDUCED_COUNTS = (50, 50, 5)


@dataclass
class SolverConfig:
    t_hj: float = 1.0
    cfl: float = 0.8
    scheme: str = "first-order-upwind"
    log_progress: bool = True
    chunk_nodes: int = 4_000_000

    def __post_init__(self):
        if self.t_hj < 0:
            raise ValueError("t_hj must be non-negative")
        if not 0 < self.cfl <= 1:
            raise ValueError("cfl must lie in (0, 1]")
        if self.scheme != "first-order-upwind":
            raise ValueError(f"unsupported scheme {self.scheme!r}")


def terminal_values(spec: GridSpec, model: GameModel) -> np.ndarray:
    if spec.ndim != model.dim:
        raise ValueError(f"grid has {spec.ndim} axes, model {model.name} has {model.dim}")
    out = np.asarray(model.margin(spec.coordinates(sparse=True)), dtype=float)
    return np.array(np.broadcast_to(out, spec.shape))


def _lin(costate, jac, m):
    """Per-input coefficients ``(p^T G)_i`` skipping structural zeros."""
    coeffs = []
    for i in range(m):
        acc = 0.0
        for j, pj in enumerate(costate):
            g = jac[j][i]
            if isinstance(g, float) and g == 0.0:
                continue
            acc = acc + (pj if isinstance(g, float) and g == 1.0 else pj * g)
        coeffs.append(acc)
    return coeffs


def _box_extreme(coeffs, bounds, take_max: bool):
    total = 0.0
    for i, c in enumerate(coeffs):
        if isinstance(c, float) and c == 0.0:
            continue
        lo_term, hi_term = c * bounds[0, i], c * bounds[1, i]
        total = total + (np.maximum(lo_term, hi_term) if take_max else np.minimum(lo_term, hi_term))
    return total


def _hamiltonian_coords(model: GameModel, coords, costate):
    h = 0.0
    for pj, fj in zip(costate, model.drift(coords)):
        if isinstance(fj, float) and fj == 0.0:
            continue
        h = h + pj * fj
    m = model.ego_bounds.shape[1]
    h = h + _box_extreme(_lin(costate, model.ego_jacobian(coords), m), model.ego_bounds, True)
    if model.dist_jacobian is not None:
        md = model.dist_bounds.shape[1]
        h = h + _box_extreme(_lin(costate, model.dist_jacobian(coords), md), model.dist_bounds, False)
    return h


def hamiltonian(model: GameModel, x, p):
    """``sup_u inf_uh p . f(x, u, uh)`` evaluated in closed form over the boxes."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    coords = [x[..., j] for j in range(model.dim)]
    costate = [p[..., j] for j in range(model.dim)]
    h = _hamiltonian_coords(model, coords, costate)
    out = np.broadcast_to(h, np.broadcast_shapes(x.shape[:-1], p.shape[:-1]))
    return float(out) if out.ndim == 0 else np.array(out)


def dissipation_bounds(model: GameModel, spec: GridSpec) -> np.ndarray:
    """Per-axis bound on ``|x_j'|`` over grid nodes and both control boxes."""
    coords = spec.coordinates(sparse=True)
    alpha = np.zeros(model.dim)

    def absmax(term):
        if isinstance(term, float):
            return abs(term)
        return float(np.max(np.abs(term)))

    drift = model.drift(coords)
    jac_a = model.ego_jacobian(coords)
    umax = np.max(np.abs(model.ego_bounds), axis=0)
    for j in range(model.dim):
        alpha[j] = absmax(drift[j]) + sum(absmax(jac_a[j][i]) * umax[i] for i in range(len(umax)))
    if model.dist_jacobian is not None:
        jac_b = model.dist_jacobian(coords)
        dmax = np.max(np.abs(model.dist_bounds), axis=0)
        for j in range(model.dim):
            alpha[j] += sum(absmax(jac_b[j][i]) * dmax[i] for i in range(len(dmax)))
    return alpha


def _one_sided(block: np.ndarray, axis: int, ax: Axis, full: np.ndarray, lo: int, hi: int):
    """Backward/forward differences along ``axis`` for the slab ``[lo:hi]`` of axis 0."""
    h = ax.spacing
    if axis == 0:
        # block carries one halo row on each side where available
        n = ax.count
        idx = np.arange(lo - 1, hi + 1)
        if ax.periodic:
            ext = np.take(full, np.mod(idx, n), axis=0)
        else:
            inner = np.take(full, np.clip(idx, 0, n - 1), axis=0)
            ext = inner.copy()
            if lo == 0:
                ext[0] = 2 * full[0] - full[1]
            if hi == n:
                ext[-1] = 2 * full[n - 1] - full[n - 2]
        d = np.diff(ext, axis=0) / h
        return d[:-1], d[1:]
    v = block
    first = np.take(v, [0], axis=axis)
    last = np.take(v, [-1], axis=axis)
    if ax.periodic:
        lo_ghost, hi_ghost = last, first
    else:
        lo_ghost = 2 * first - np.take(v, [1], axis=axis)
        hi_ghost = 2 * last - np.take(v, [-2], axis=axis)
    d = np.diff(np.concatenate([lo_ghost, v, hi_ghost], axis=axis), axis=axis) / h
    n = v.shape[axis]
    return np.take(d, np.arange(n), axis=axis), np.take(d, np.arange(1, n + 1), axis=axis)


def _lf_increment(model, spec, coords, alpha, values, lo, hi):
    """Lax-Friedrichs numerical Hamiltonian on the axis-0 slab ``[lo:hi]``."""
    block = values[lo:hi]
    sub = [c[lo:hi] if c.shape[0] > 1 else c for c in coords]
    avg, diss = [], 0.0
    for j, ax in enumerate(spec.axes):
        dm, dp = _one_sided(block, j, ax, values, lo, hi)
        avg.append(0.5 * (dm + dp))
        diss = diss + 0.5 * alpha[j] * (dp - dm)
    return _hamiltonian_coords(model, sub, avg) + diss


def _time_step(spec: GridSpec, alpha: np.ndarray, cfl: float) -> float:
    rate = float(np.sum(alpha / spec.spacings))
    if not np.isfinite(rate):
        raise ValueError("dissipation bounds are not finite; check the model over the grid domain")
    if rate == 0:
        return math.inf
    dt = cfl / rate
    # dyadic step: horizons that are dyadic multiples share identical steps
    return 2.0 ** math.floor(math.log2(dt))


def solve(model: GameModel, spec: GridSpec, cfg: SolverConfig | None = None) -> ValueFunction:
    """Backward sweep of the HJI-VI from ``T_hj`` to 0; returns the t=0 slice."""
    cfg = cfg or SolverConfig()
    l = terminal_values(spec, model)
    meta = {
        "model": model.name,
        "r_s": model.r_s,
        "t_hj": cfg.t_hj,
        "cfl": cfg.cfl,
        "scheme": cfg.scheme,
        **model.meta,
    }
    if cfg.t_hj == 0:
        return ValueFunction(spec, l, meta)
    coords = spec.coordinates(sparse=True)
    alpha = dissipation_bounds(model, spec)
    dt_max = _time_step(spec, alpha, cfg.cfl)
    n_steps = max(1, math.ceil(cfg.t_hj / dt_max - 1e-12))
    steps = [dt_max] * (n_steps - 1) + [cfg.t_hj - dt_max * (n_steps - 1)]
    plane = int(np.prod(spec.shape[1:]))
    rows = max(1, cfg.chunk_nodes // max(plane, 1))
    values = l.copy()
    t = cfg.t_hj
    t0 = time.perf_counter()
    for k, dt in enumerate(steps, start=1):
        nxt = np.empty_like(values)
        for lo in range(0, spec.shape[0], rows):
            hi = min(spec.shape[0], lo + rows)
            inc = _lf_increment(model, spec, coords, alpha, values, lo, hi)
            # the extra min against the previous iterate only bites at the
            # extrapolated faces; the exact payoff is non-increasing in horizon
            nxt[lo:hi] = np.minimum(np.minimum(l[lo:hi], values[lo:hi] + dt * inc), values[lo:hi])
        if not np.all(np.isfinite(nxt)):
            bad = np.unravel_index(int(np.flatnonzero(~np.isfinite(nxt))[0]), spec.shape)
            raise SolverDivergenceError(k, tuple(int(i) for i in bad))
        values = nxt
        t -= dt
        if cfg.log_progress:
            logger.info("step %d / %d, t = %.4f, min V = %.6g", k, n_steps, max(t, 0.0), float(values.min()))
    meta["n_steps"] = n_steps
    meta["dt"] = dt_max
    logger.debug("solve %s finished in %.2fs", model.name, time.perf_counter() - t0)
    return ValueFunction(spec, values, meta)


class ReachabilitySolver(BaseEstimator):
    """Estimator wrapper: ``fit()`` solves the game and exposes ``value_function_``.

    Parameters mirror :class:`SolverConfig` plus the model and grid choice,
    so the solver can be cloned or parameter-swept like any estimator.
    """

    def __init__(self, model="hv5d", counts=None, t_hj=1.0, cfl=0.8, r_s=None):
        self.model = model
        self.counts = counts
        self.t_hj = t_hj
        self.cfl = cfl
        self.r_s = r_s

    def _build(self):
        if self.model == "hv5d":
            model = hv_relative_model(0.6 if self.r_s is None else self.r_s)
            spec = hv_grid(self.counts or (100, 100, 64, 8, 8))
        elif self.model == "static3d":
            model = static_obstacle_model(0.4 if self.r_s is None else self.r_s)
            spec = static_grid(self.counts or (100, 100, 8))
        else:
            raise ValueError(f"unknown model {self.model!r}; expected 'hv5d' or 'static3d'")
        if len(spec.shape) != model.dim:
            raise ValueError(f"counts {self.counts} do not match model dimension {model.dim}")
        return model, spec

    def fit(self, X=None, y=None):
        model, spec = self._build()
        self.value_function_ = solve(model, spec, SolverConfig(t_hj=self.t_hj, cfl=self.cfl))
        return self

    def predict(self, X):
        """Interpolated value at relative states ``X``."""
        from sklearn.utils.validation import check_array, check_is_fitted

        check_is_fitted(self, "value_function_")
        X = check_array(X, ensure_min_features=self.value_function_.ndim)
        return self.value_function_.interpolate(X)
