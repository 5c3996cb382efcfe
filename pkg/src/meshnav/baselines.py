"""Baseline planners sharing the rollout core and objectives.

MPPI collapses both objectives into one weighted scalar cost and
softmax-averages sampled perturbations into a nominal sequence; the
fixed-bound planner is the adaptive planner with a constant stability
budget.  Pure unbiased sampling needs no code of its own: run plan_step
with alpha_fmm = 0.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .dynamics import Control, rollout_batch
from .objectives import ObjectiveParams
from .planner import PlannerConfig, PlanStepResult, plan_step, score_rollouts


@dataclass(frozen=True)
class MppiConfig:
    """Sampler and scalarization knobs of the path-integral baseline."""

    temperature: float = 1.0
    w1: float = 1.0
    w2: float = 1.0
    n_samples: int = 100
    sigma_v: float = 0.5
    sigma_omega: float = 0.3
    horizon: int = 20
    hard_penalty: float = 1e6

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.w1 < 0 or self.w2 < 0 or (self.w1 == 0 and self.w2 == 0):
            raise ValueError("weights must be non-negative and not both zero")
        if self.n_samples < 2 or self.horizon < 1:
            raise ValueError("need n_samples >= 2 and horizon >= 1")


def default_mppi_config(cfg: PlannerConfig) -> MppiConfig:
    """MppiConfig matched to a planner config's sampler dimensions."""
    return MppiConfig(
        n_samples=cfg.n_cand,
        sigma_v=cfg.sigma_v,
        sigma_omega=cfg.sigma_omega,
        horizon=cfg.horizon,
    )


def mppi_plan_step(x_k, nominal, cfg: MppiConfig | None, mesh, ctx, field, model, rng,
                   planner_cfg: PlannerConfig | None = None,
                   objectives: ObjectiveParams | None = None):
    """One MPPI update.

    Perturbs the nominal sequence with Gaussian noise, scores the clamped
    rollouts by w1*f1 + w2*f2 (hard violations add a large finite penalty),
    softmax-weights the realized perturbations into the nominal, and
    returns (first control, shifted nominal, info dict).
    """
    t0 = time.perf_counter()
    pcfg = planner_cfg or PlannerConfig()
    cfg = cfg or default_mppi_config(pcfg)
    if nominal is None:
        # start moving: a zero nominal stalls the weighted average at rest
        nominal = np.column_stack([
            np.full(cfg.horizon, pcfg.beta * pcfg.v_max),
            np.zeros(cfg.horizon),
        ])
    nominal = np.asarray(nominal, dtype=float)

    noise = rng.normal(size=(cfg.n_samples, cfg.horizon, 2)) * [cfg.sigma_v, cfg.sigma_omega]
    U = nominal[None] + noise
    U[..., 0] = np.clip(U[..., 0], -pcfg.v_max, pcfg.v_max)
    U[..., 1] = np.clip(U[..., 1], -pcfg.omega_max, pcfg.omega_max)

    rb = rollout_batch(x_k, U, mesh, ctx, model, pcfg.dt)
    f1, f2, hard = score_rollouts(rb.states, rb.deviations, rb.off_mesh | rb.lethal,
                                  field, mesh, objectives)
    cost = cfg.w1 * f1 + cfg.w2 * f2 + cfg.hard_penalty * hard

    w = np.exp(-(cost - cost.min()) / cfg.temperature)
    w = w / w.sum()
    updated = nominal + np.einsum("n,nhc->hc", w, U - nominal[None])
    updated[:, 0] = np.clip(updated[:, 0], -pcfg.v_max, pcfg.v_max)
    updated[:, 1] = np.clip(updated[:, 1], -pcfg.omega_max, pcfg.omega_max)

    control = Control(updated[0, 0], updated[0, 1], v_max=pcfg.v_max, omega_max=pcfg.omega_max)
    shifted = np.vstack([updated[1:], updated[-1:]])
    info = {
        "time_ms": (time.perf_counter() - t0) * 1e3,
        "cost_min": float(cost.min()),
        "hard_count": int(hard.sum()),
        "weights_max": float(w.max()),
    }
    return control, shifted, info


def fixed_epsilon_plan_step(x_k, field, mesh, ctx, model=None, prev_controls=None,
                            cfg: PlannerConfig | None = None, rng=None, epsilon: float = 25.0,
                            objectives: ObjectiveParams | None = None) -> PlanStepResult:
    """plan_step with the adaptive stability bound pinned to a constant."""
    return plan_step(x_k, field, mesh, ctx, model, prev_controls, cfg, rng,
                     fixed_epsilon=epsilon, objectives=objectives)
