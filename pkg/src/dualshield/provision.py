"""Locate, load or compute the value functions a scenario needs."""
from __future__ import annotations

import logging
import os
import time
from pathlib import Path
from typing import Optional

from . import grid
from .hj_solver import SolverConfig, hv_grid, hv_relative_model, solve, static_grid, static_obstacle_model
from .objective import ValueFunctionSet

logger = logging.getLogger(__name__)

ENV_VAR = "DUALSHIELD_VF_DIR"


def vf_dir(override: Optional[str] = None) -> Path:
    """``override``, else ``$DUALSHIELD_VF_DIR``, else ``~/.cache/dualshield``."""
    if override:
        return Path(override)
    env = os.environ.get(ENV_VAR)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "dualshield"


def vf_filename(model: str, counts, t_hj: float) -> str:
    return f"{model}_{'x'.join(str(int(c)) for c in counts)}_T{t_hj:g}.hjvf"


def build(model: str, counts, t_hj: float, r_s: Optional[float] = None) -> grid.ValueFunction:
    if model == "hv5d":
        m = hv_relative_model() if r_s is None else hv_relative_model(r_s)
        spec = hv_grid(counts)
    elif model == "static3d":
        m = static_obstacle_model() if r_s is None else static_obstacle_model(r_s)
        spec = static_grid(counts)
    else:
        raise ValueError(f"unknown model {model!r}; expected hv5d or static3d")
    return solve(m, spec, SolverConfig(t_hj=t_hj))


def ensure(model: str, counts, t_hj: float, directory: Optional[str] = None) -> grid.ValueFunction:
    """Load the cached value function, computing and caching it if absent."""
    path = vf_dir(directory) / vf_filename(model, counts, t_hj)
    if path.exists():
        return grid.load(path)
    logger.info("value function %s not cached; computing", path.name)
    t0 = time.perf_counter()
    vf = build(model, counts, t_hj)
    grid.save(vf, path)
    logger.info("computed %s in %.1f s", path.name, time.perf_counter() - t0)
    return vf


def value_functions(grids, directory: Optional[str] = None) -> ValueFunctionSet:
    """Both value functions for a scenario's grid settings."""
    hv = ensure("hv5d", grids.hv_counts, grids.t_hj, directory)
    st = ensure("static3d", grids.static_counts, grids.t_hj, directory)
    return ValueFunctionSet(hv=hv, static=st)
