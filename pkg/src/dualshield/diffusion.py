"""Model-based diffusion over control sequences.

The score of the diffused target is estimated on the fly: clean candidates
are drawn around the rescaled iterate, weighted by the Gibbs density
``exp(-J / lambda)`` of their rollout cost, and averaged.  No network is
trained; the cost function *is* the model.

Control sequences are ``(N, 2)`` arrays of ``(w, a)`` pairs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state

from .dynamics import EGO_BOUNDS, rollout_batch
from .objective import ObjectiveWeights, PlanningScene, trajectory_costs

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """``alphas[i]`` and ``alpha_bars[i]`` for ``i = 1..n_steps``; index 0 holds 1."""

    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.alphas) - 1


def make_schedule(n_steps: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear-beta schedule."""
    if n_steps < 1:
        raise ValueError("need at least one diffusion step")
    betas = np.linspace(beta_start, beta_end, n_steps)
    alphas = np.concatenate([[1.0], 1.0 - betas])
    return NoiseSchedule(alphas=alphas, alpha_bars=np.cumprod(alphas))


def sample_candidates(u_i, i: int, n: int, rng, schedule: NoiseSchedule) -> np.ndarray:
    """Clean candidates ``~ N(u_i / sqrt(ab_i), (1 - ab_i) / ab_i)``."""
    u_i = np.asarray(u_i, dtype=float)
    ab = schedule.alpha_bars[i]
    std = np.sqrt((1.0 - ab) / ab)
    return u_i / np.sqrt(ab) + std * rng.standard_normal((n,) + u_i.shape)


def gibbs_weights(costs, temperature: float) -> np.ndarray:
    """Normalised ``exp(-J / lambda)`` with a max shift; non-finite costs get 0."""
    costs = np.asarray(costs, dtype=float)
    ok = np.isfinite(costs)
    if not ok.any():
        raise ValueError("every candidate has a non-finite cost")
    logits = np.where(ok, -(costs - costs[ok].min()) / temperature, -np.inf)
    w = np.exp(logits)
    return w / w.sum()


def weighted_mean(candidates, costs, temperature: float) -> np.ndarray:
    w = gibbs_weights(costs, temperature)
    cand = np.asarray(candidates, dtype=float)
    # elementwise product + pairwise sum keeps the reduction order fixed
    return np.sum(w.reshape((-1,) + (1,) * (cand.ndim - 1)) * cand, axis=0)


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w**2))


def score(u_i, u_bar, i: int, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bars[i]
    return -np.asarray(u_i) / (1.0 - ab) + np.sqrt(ab) / (1.0 - ab) * np.asarray(u_bar)


def reverse_step(u_i, score_i, i: int, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bars[i]
    return (np.asarray(u_i) + (1.0 - ab) * np.asarray(score_i)) / np.sqrt(schedule.alphas[i])


def shift_sequence(prev) -> np.ndarray:
    """Drop the executed first control and repeat the last one."""
    prev = np.asarray(prev, dtype=float)
    return np.concatenate([prev[1:], prev[-1:]], axis=0)


def warm_start(prev, rng, schedule: NoiseSchedule, level: int) -> np.ndarray:
    """Forward-noise the shifted previous plan to ``level``."""
    ab = schedule.alpha_bars[level]
    shifted = shift_sequence(prev)
    return np.sqrt(ab) * shifted + np.sqrt(1.0 - ab) * rng.standard_normal(shifted.shape)


@dataclass
class PlannerConfig:
    horizon: int = 50
    dt: float = 0.1
    n_samples: int = 2000
    n_denoise: int = 100
    n_warm: int = 5
    temperature: float = 0.1
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    guidance: str = "hj"

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if not 1 <= self.n_warm <= self.n_denoise:
            raise ValueError("need 1 <= n_warm <= n_denoise")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "PlannerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown planner settings: {sorted(unknown)}")
        return cls(**d)


class DiffusionPlanner(BaseEstimator):
    """Receding-horizon diffusion planner.

    ``plan`` runs the full reverse chain from ``N(0, I)`` when no previous
    plan is given and the short warm-started chain otherwise.  Candidate
    generation consumes the random stream identically regardless of the
    cost, so two planners that differ only in cost see the same noise.

    Parameters
    ----------
    horizon : int
        Number of control steps ``N``.
    n_samples : int
        Candidates per denoising step.
    n_denoise, n_warm : int
        Chain length from scratch and after a warm start.
    temperature : float
        Gibbs temperature ``lambda``.
    random_state : int, Generator or None
        Default noise source when ``plan`` receives no ``rng``.
    """

    def __init__(self, horizon=50, n_samples=2000, n_denoise=100, n_warm=5, temperature=0.1,
                 beta_start=1e-4, beta_end=2e-2, random_state=None):
        self.horizon = horizon
        self.n_samples = n_samples
        self.n_denoise = n_denoise
        self.n_warm = n_warm
        self.temperature = temperature
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.random_state = random_state

    @classmethod
    def from_config(cls, cfg: PlannerConfig, random_state=None) -> "DiffusionPlanner":
        return cls(horizon=cfg.horizon, n_samples=cfg.n_samples, n_denoise=cfg.n_denoise, n_warm=cfg.n_warm,
                   temperature=cfg.temperature, beta_start=cfg.beta_start, beta_end=cfg.beta_end,
                   random_state=random_state)

    def fit(self, X=None, y=None):
        if not 1 <= self.n_warm <= self.n_denoise:
            raise ValueError("need 1 <= n_warm <= n_denoise")
        self.schedule_ = make_schedule(self.n_denoise, self.beta_start, self.beta_end)
        self.rng_ = self.random_state if isinstance(self.random_state, np.random.Generator) else \
            np.random.default_rng(check_random_state(self.random_state).randint(2**31))
        self.diagnostics_ = []
        return self

    def plan(self, cost_fn: Callable[[np.ndarray], np.ndarray], prev=None, rng=None) -> np.ndarray:
        """Denoise a ``(horizon, 2)`` control sequence under ``cost_fn``.

        ``cost_fn`` maps a candidate batch ``(n, horizon, 2)`` to costs ``(n,)``.
        """
        if not hasattr(self, "schedule_"):
            self.fit()
        rng = self.rng_ if rng is None else rng
        sched = self.schedule_
        if prev is None:
            u = rng.standard_normal((self.horizon, 2))
            start = self.n_denoise
        else:
            prev = np.asarray(prev, dtype=float).reshape(self.horizon, 2)
            u = warm_start(prev, rng, sched, self.n_warm)
            start = self.n_warm
        self.diagnostics_ = []
        for i in range(start, 0, -1):
            cands = sample_candidates(u, i, self.n_samples, rng, sched)
            costs = np.asarray(cost_fn(cands), dtype=float)
            w = gibbs_weights(costs, self.temperature)
            u_bar = np.sum(w[:, None, None] * cands, axis=0)
            u = reverse_step(u, score(u, u_bar, i, sched), i, sched)
            finite = costs[np.isfinite(costs)]
            record = {"step": i, "min_cost": float(finite.min()), "mean_cost": float(finite.mean()),
                      "ess": effective_sample_size(w)}
            self.diagnostics_.append(record)
            logger.debug("denoise", extra={"planner": record})
        return u


def scene_cost_fn(x0, scene: PlanningScene, weights: ObjectiveWeights, dt: float, guidance: str = "hj"):
    """Cost callable: clamp + roll out candidates, then score them."""
    x0 = np.asarray(x0, dtype=float)

    def cost(cands):
        states, controls = rollout_batch(x0, cands, dt, EGO_BOUNDS)
        return trajectory_costs(states, controls, scene, weights, guidance)

    return cost


def plan(x0, scene: PlanningScene, weights: ObjectiveWeights, cfg: PlannerConfig, rng,
         prev: Optional[np.ndarray] = None) -> np.ndarray:
    """One planning call on a driving scene; returns the nominal sequence ``u^(0)``."""
    planner = DiffusionPlanner.from_config(cfg, random_state=rng).fit()
    return planner.plan(scene_cost_fn(x0, scene, weights, cfg.dt, cfg.guidance), prev=prev, rng=rng)
