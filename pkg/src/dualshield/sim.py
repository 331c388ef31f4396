"""Closed-loop simulation: plan, shield, advance, log; plus seeded batches.

Every random draw comes from a named stream derived from the trial seed,
so a ``(scenario, seed)`` pair fixes every trajectory byte and batch
results do not depend on which worker ran which trial.
"""
from __future__ import annotations

import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .diffusion import DiffusionPlanner, scene_cost_fn
from .dynamics import EGO_BOUNDS, euler_step
from .metrics import collision_and_distance, detect_success, jerk_metric
from .objective import PlanningScene, ValueFunctionSet, constant_velocity_prediction, min_values
from .scenario import RANDOM, Scenario
from .shield import filter_control
from .traffic import BehaviorMode, hv_policy

logger = logging.getLogger(__name__)

MODES = (BehaviorMode.COOPERATIVE, BehaviorMode.OBLIVIOUS, BehaviorMode.ADVERSARIAL)


def _tag(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def derive_seed(base_seed: int, tag: str, *indices: int) -> int:
    """Counter-style child seed for ``(base_seed, tag, indices)``; order independent."""
    ss = np.random.SeedSequence(int(base_seed), spawn_key=(_tag(tag),) + tuple(int(i) for i in indices))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def stream(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(_tag(tag),)))


@dataclass
class TrialSetup:
    modes: list
    speeds: list


def sample_setup(scn: Scenario, config_seed: int) -> TrialSetup:
    """Behaviour modes and initial HV speeds for one scenario configuration.

    One mode and one speed are drawn per HV even when the scenario fixes
    them, so fixing one HV never shifts another HV's draw.
    """
    mode_rng = stream(config_seed, "behavior")
    speed_rng = stream(config_seed, "hv_speed")
    lo, hi = scn.hv_speed_range
    modes, speeds = [], []
    for hv in scn.hvs:
        m = MODES[int(mode_rng.integers(len(MODES)))]
        v = float(speed_rng.uniform(lo, hi))
        modes.append(m.value if hv.mode == RANDOM else hv.mode)
        speeds.append(v if hv.speed == RANDOM else float(hv.speed))
    return TrialSetup(modes=modes, speeds=speeds)


@dataclass
class World:
    """Mutable closed-loop state plus the logs accumulated so far."""

    k: int
    ego: np.ndarray
    hvs: np.ndarray  # (M, 4)
    prev_plan: Optional[np.ndarray] = None
    ego_log: list = field(default_factory=list)
    hv_log: list = field(default_factory=list)
    u_plan: list = field(default_factory=list)
    u_safe: list = field(default_factory=list)
    eps: list = field(default_factory=list)
    active: list = field(default_factory=list)
    v_min: list = field(default_factory=list)
    shield_log: list = field(default_factory=list)
    plan_times: list = field(default_factory=list)


class Simulator:
    """Runs the receding-horizon loop for one trial.

    ``value_fns`` may be ``None`` only with the shield off and distance
    guidance; ``V_min`` is then logged as NaN.
    """

    def __init__(self, scn: Scenario, value_fns: Optional[ValueFunctionSet], setup: TrialSetup, seed: int):
        if value_fns is None and (scn.shield.enabled or scn.planner.guidance == "hj"):
            raise ValueError("value functions are required for the shield or HJ guidance")
        self.scn = scn
        self.value_fns = value_fns
        self.setup = setup
        self.seed = int(seed)
        self.rng = stream(seed, "diffusion")
        self.planner = DiffusionPlanner.from_config(scn.planner, random_state=self.rng).fit()
        self.idm = [h.idm_params(v) for h, v in zip(scn.hvs, setup.speeds)]

    def initial_world(self) -> World:
        hvs = np.array([[*h.start, v] for h, v in zip(self.scn.hvs, self.setup.speeds)]).reshape(-1, 4)
        w = World(k=0, ego=self.scn.ego_start.copy(), hvs=hvs)
        w.ego_log.append(w.ego.copy())
        w.hv_log.append(hvs.copy())
        w.v_min.append(self._v_min(w.ego, hvs))
        return w

    def _v_min(self, ego, hvs) -> float:
        if self.value_fns is None:
            return float("nan")
        scene = PlanningScene(goal=self.scn.goal, hv_prediction=hvs[:, None, :], statics=self.scn.statics,
                              value_fns=self.value_fns, num_static=self.scn.shield.num_static,
                              footprint_offset=self.scn.footprint.offset)
        return float(min_values(ego[None, :], scene)[0])

    def _scene(self, hvs) -> PlanningScene:
        p = self.scn.planner
        return PlanningScene(goal=self.scn.goal, hv_prediction=constant_velocity_prediction(hvs, p.horizon, p.dt),
                             statics=self.scn.statics, value_fns=self.value_fns,
                             num_static=self.scn.shield.num_static, footprint_offset=self.scn.footprint.offset)

    def step(self, w: World) -> World:
        scn = self.scn
        cost = scene_cost_fn(w.ego, self._scene(w.hvs), scn.weights, scn.dt, scn.planner.guidance)
        t0 = time.perf_counter()
        plan = self.planner.plan(cost, prev=w.prev_plan, rng=self.rng)
        w.plan_times.append(time.perf_counter() - t0)
        u_plan = EGO_BOUNDS.clip(plan[0])
        if scn.shield.enabled:
            res = filter_control(u_plan, w.ego, w.hvs, scn.statics, self.value_fns, scn.shield, EGO_BOUNDS,
                                 footprint_offset=scn.footprint.offset)
            u, eps, active, record = res.control, res.slack, res.active, res.record
        else:
            u, eps, active, record = u_plan, 0.0, False, None
        hv_u = [hv_policy(h, m, w.ego, spec.lane, p, v0, scn.dt)
                for h, m, spec, p, v0 in zip(w.hvs, self.setup.modes, scn.hvs, self.idm, self.setup.speeds)]
        w.ego = euler_step(w.ego, u, scn.dt)
        if len(w.hvs):
            w.hvs = np.array([euler_step(h, uh, scn.dt) for h, uh in zip(w.hvs, hv_u)])
        # out-of-box entries cost the same as the box edge; pull them back so the
        # shallow warm-start noise can still move them
        w.prev_plan = EGO_BOUNDS.clip(plan)
        w.k += 1
        w.u_plan.append(u_plan)
        w.u_safe.append(np.asarray(u, dtype=float))
        w.eps.append(float(eps))
        w.active.append(bool(active))
        w.shield_log.append(record)
        w.ego_log.append(w.ego.copy())
        w.hv_log.append(w.hvs.copy())
        w.v_min.append(self._v_min(w.ego, w.hvs))
        return w

    def run(self, config_seed: int) -> "TrialResult":
        w = self.initial_world()
        for _ in range(self.scn.n_steps):
            self.step(w)
            logger.debug("step %d ego=%s", w.k, w.ego)
        return TrialResult.from_world(self.scn, w, self.setup, self.seed, config_seed)


def _finite_or_none(x):
    return None if x is None or not np.isfinite(x) else float(x)


@dataclass
class TrialResult:
    seed: int
    config_seed: int
    modes: list
    hv_speeds: list
    ego_states: np.ndarray  # (K+1, 4)
    hv_states: np.ndarray  # (M, K+1, 4)
    u_plan: np.ndarray  # (K, 2)
    u_safe: np.ndarray  # (K, 2)
    eps: np.ndarray
    shield_active: np.ndarray
    v_min: np.ndarray  # (K+1,)
    success: bool
    completion_time: Optional[float]
    min_distance: float
    collision: bool
    avg_jerk: float
    plan_times: list = field(default_factory=list)
    shield_log: list = field(default_factory=list)
    dt: float = 0.1

    @property
    def mean_plan_time(self) -> float:
        return float(np.mean(self.plan_times)) if self.plan_times else float("nan")

    @classmethod
    def from_world(cls, scn: Scenario, w: World, setup: TrialSetup, seed: int, config_seed: int) -> "TrialResult":
        ego = np.array(w.ego_log)
        hv = np.stack(w.hv_log, axis=1) if len(scn.hvs) else np.zeros((0, len(w.ego_log), 4))
        u_safe = np.array(w.u_safe).reshape(-1, 2)
        success, t_m = detect_success(ego, scn.goal, scn.dt)
        collision, l_min = collision_and_distance(ego, hv, scn.statics, scn.footprint, scn.static_radius)
        return cls(seed=int(seed), config_seed=int(config_seed), modes=list(setup.modes),
                   hv_speeds=list(setup.speeds), ego_states=ego, hv_states=hv,
                   u_plan=np.array(w.u_plan).reshape(-1, 2), u_safe=u_safe, eps=np.array(w.eps),
                   shield_active=np.array(w.active, dtype=bool), v_min=np.array(w.v_min), success=success,
                   completion_time=t_m, min_distance=l_min, collision=collision,
                   avg_jerk=jerk_metric(u_safe[:, 1], scn.dt), plan_times=list(w.plan_times),
                   shield_log=list(w.shield_log), dt=scn.dt)

    def summary(self) -> dict:
        """Deterministic per-trial metrics (no wall-clock entries)."""
        return {
            "seed": self.seed,
            "config_seed": self.config_seed,
            "modes": list(self.modes),
            "hv_speeds": [float(v) for v in self.hv_speeds],
            "success": bool(self.success),
            "completion_time": _finite_or_none(self.completion_time),
            "min_distance": _finite_or_none(self.min_distance),
            "collision": bool(self.collision),
            "avg_jerk": float(self.avg_jerk),
            "shield_interventions": int(np.sum(self.shield_active)),
        }

    def to_dict(self) -> dict:
        """Full deterministic record; plan timing is kept out (see :meth:`timing`)."""
        d = self.summary()
        d.update({
            "dt": self.dt,
            "ego_states": self.ego_states.tolist(),
            "hv_states": self.hv_states.tolist(),
            "u_plan": self.u_plan.tolist(),
            "u_safe": self.u_safe.tolist(),
            "eps": self.eps.tolist(),
            "shield_active": self.shield_active.tolist(),
            "v_min": [_finite_or_none(v) for v in self.v_min],
            "shield_log": self.shield_log,
        })
        return d

    def timing(self) -> dict:
        return {"seed": self.seed, "mean_plan_time": self.mean_plan_time, "plan_times": list(self.plan_times)}


def run_trial(scn: Scenario, seed: int, value_fns: Optional[ValueFunctionSet] = None,
              config_seed: Optional[int] = None) -> TrialResult:
    """One closed-loop trial.  Without ``config_seed`` every draw derives from ``seed``."""
    config_seed = int(seed) if config_seed is None else int(config_seed)
    setup = sample_setup(scn, config_seed)
    return Simulator(scn, value_fns, setup, seed).run(config_seed)


TABLE_COLUMNS = ("P_s (%)", "P_c (%)", "l_r,min (m)", "T_m (s)", "j (m/s^3)", "T_c (s)")


def aggregate(summaries: list) -> dict:
    """Batch metrics from per-trial summaries."""
    n = len(summaries)
    if n == 0:
        raise ValueError("empty batch")
    succ = [s for s in summaries if s["success"]]
    dists = [s["min_distance"] for s in summaries if s["min_distance"] is not None]
    return {
        "n_trials": n,
        "success_rate": 100.0 * len(succ) / n,
        "collision_rate": 100.0 * sum(s["collision"] for s in summaries) / n,
        "mean_min_distance": float(np.mean(dists)) if dists else None,
        "min_min_distance": float(np.min(dists)) if dists else None,
        "mean_completion_time": float(np.mean([s["completion_time"] for s in succ])) if succ else None,
        "mean_jerk": float(np.mean([s["avg_jerk"] for s in summaries])),
    }


@dataclass
class BatchReport:
    base_seed: int
    num_configs: int
    trials_per_config: int
    trials: list  # per-trial summaries, in (config, trial) order
    plan_times: list  # mean plan time per trial, same order

    @property
    def aggregates(self) -> dict:
        return aggregate(self.trials)

    @property
    def mean_plan_time(self) -> float:
        return float(np.mean(self.plan_times)) if self.plan_times else float("nan")

    def to_dict(self) -> dict:
        """Deterministic report; wall-clock plan times live in :meth:`timing`."""
        return {"base_seed": self.base_seed, "num_configs": self.num_configs,
                "trials_per_config": self.trials_per_config, "aggregates": self.aggregates,
                "trials": self.trials}

    def timing(self) -> dict:
        return {"mean_plan_time": self.mean_plan_time, "per_trial_mean_plan_time": list(self.plan_times)}

    def table_row(self) -> list:
        a = self.aggregates

        def fmt(x, spec):
            return "n/a" if x is None or not np.isfinite(x) else format(x, spec)

        return [fmt(a["success_rate"], ".0f"), fmt(a["collision_rate"], ".0f"), fmt(a["mean_min_distance"], ".3f"),
                fmt(a["mean_completion_time"], ".2f"), fmt(a["mean_jerk"], ".3f"), fmt(self.mean_plan_time, ".3f")]

    def summary_table(self, label: str = "run") -> str:
        header = ["method", *TABLE_COLUMNS]
        row = [label, *self.table_row()]
        widths = [max(len(h), len(r)) for h, r in zip(header, row)]
        line = lambda cells: "  ".join(c.rjust(wd) for c, wd in zip(cells, widths))  # noqa: E731
        return line(header) + "\n" + line(row)


def trial_seeds(base_seed: int, config_index: int, trial_index: int) -> tuple[int, int]:
    """``(trial seed, configuration seed)`` for one batch slot."""
    return derive_seed(base_seed, "trial", config_index, trial_index), derive_seed(base_seed, "config", config_index)


_WORKER: dict = {}


def _worker_init(scn, value_fns):
    _WORKER["scn"] = scn
    _WORKER["vf"] = value_fns


def _worker_run(job):
    seed, config_seed = job
    r = run_trial(_WORKER["scn"], seed, _WORKER["vf"], config_seed)
    return r.summary(), r.mean_plan_time


def run_batch(scn: Scenario, num_configs: int, trials_per_config: int, base_seed: int,
              value_fns: Optional[ValueFunctionSet] = None, workers: int = 1) -> BatchReport:
    """Seeded batch; results are gathered in (config, trial) index order."""
    if num_configs < 1 or trials_per_config < 1:
        raise ValueError("need at least one configuration and one trial")
    if workers < 1:
        raise ValueError("workers must be at least 1")
    jobs = [trial_seeds(base_seed, c, t) for c in range(num_configs) for t in range(trials_per_config)]
    if workers == 1:
        _worker_init(scn, value_fns)
        out = [_worker_run(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init, initargs=(scn, value_fns)) as pool:
            out = list(pool.map(_worker_run, jobs))
    return BatchReport(base_seed=int(base_seed), num_configs=num_configs, trials_per_config=trials_per_config,
                       trials=[o[0] for o in out], plan_times=[o[1] for o in out])
