"""Terrain-adaptive epsilon-constraint receding-horizon planner.

Each planning step draws candidate control sequences (a warm-started half
plus a field-guided half), simulates them through the shared rollout core,
scores path alignment f1 and tilt stability f2, and picks the feasible
candidate (f2 <= eps, no hard violations) with the lowest f1.  The bound
eps adapts to local roughness and inclination; when no candidate is
feasible the vehicle rotates in place toward the guidance field.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .descriptors import TerrainDescriptor, descriptors_at, vertex_curvatures
from .dynamics import Control, RolloutContext, State, rollout_batch
from .field import (
    NoDirectionError,
    UnreachableGoalError,
    VectorField,
    VertexCostParams,
    compute_field,
    directions_at,
    vertex_costs,
)
from .mesh import TriangleMesh, terrain_heights
from .metrics import (
    FAILURE_OFFMESH,
    FAILURE_TIPOVER,
    INFEASIBLE,
    SUCCESS,
    TIMEOUT,
    RunResult,
)
from .objectives import ObjectiveParams, alignment_terms, stability_terms, wrap_angle


class PlanningError(RuntimeError):
    """Planning was asked to proceed from an unusable state."""


@dataclass(frozen=True)
class PlannerConfig:
    """Knobs of the candidate sampler, the adaptive bound, and the run loop.

    max_roughness is the terrain calibration constant feeding the adaptive
    bound; set it from calibrate_max_roughness on the mission mesh.
    """

    horizon: int = 20
    dt: float = 0.1
    n_cand: int = 100
    alpha_fmm: float = 0.7
    eps_base: float = 0.5
    gamma_r: float = 0.5
    gamma_s: float = 0.3
    sigma_v: float = 0.5
    sigma_omega: float = 0.3
    v_max: float = 1.5
    omega_max: float = 3.22
    beta: float = 0.8
    k_p: float = 1.5
    delta_term: float = 0.5
    max_iters: int = 200
    seed: int = 0
    eps_floor: float = 0.3
    max_roughness: float = 1.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.n_cand < 2:
            raise ValueError("n_cand must be >= 2")
        if not 0.0 <= self.alpha_fmm <= 1.0:
            raise ValueError("alpha_fmm must lie in [0, 1]")
        if not 0.0 < self.eps_floor <= 1.0:
            raise ValueError("eps_floor must lie in (0, 1]")
        for name in ("dt", "eps_base", "sigma_v", "sigma_omega", "v_max",
                     "omega_max", "beta", "k_p", "delta_term", "max_roughness"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class PlanStepResult:
    """Outcome of one planning step plus the full candidate table."""

    control: Control
    best_controls: np.ndarray | None  # (H, 2); None when falling back
    best_index: int | None
    feasible_count: int
    epsilon: float
    f1: np.ndarray
    f2: np.ndarray
    feasible: np.ndarray
    fallback: bool
    time_ms: float

    def __post_init__(self):
        if self.fallback != (self.feasible_count == 0):
            raise ValueError("fallback flag must mirror an empty feasible set")


def adaptive_epsilon(descriptor, cfg: PlannerConfig) -> float:
    """Stability budget shrunk by local roughness and inclination, floored.

    eps = eps_base * max(eps_floor, min(f_r, f_s)) with
    f_r = 1 - gamma_r * min(1, sigma_z / max_roughness) and
    f_s = 1 - gamma_s * min(1, inclination / (pi/2)).
    """
    if isinstance(descriptor, TerrainDescriptor):
        rough = descriptor.sigma_z
        nz = descriptor.normal[2]
    else:
        d = np.asarray(descriptor, dtype=float)
        rough, nz = d[3], d[2]
    incl = math.acos(min(max(nz, 0.0), 1.0))
    f_r = 1.0 - cfg.gamma_r * min(1.0, rough / cfg.max_roughness)
    f_s = 1.0 - cfg.gamma_s * min(1.0, incl / (math.pi / 2.0))
    return cfg.eps_base * max(cfg.eps_floor, min(f_r, f_s))


def warm_start_candidates(prev_controls, count: int, cfg: PlannerConfig, rng) -> np.ndarray:
    """Shift the previous best sequence one step and jitter it.

    Returns (count, H, 2); the vacated last slot repeats the new final
    element, noise is Gaussian per element, and both channels clamp to the
    admissible box.
    """
    prev = np.asarray(prev_controls, dtype=float)
    if prev.ndim != 2 or prev.shape[1] != 2:
        raise ValueError("prev_controls must be (H, 2)")
    shifted = np.vstack([prev[1:], prev[-1:]])
    noise = rng.normal(size=(count,) + shifted.shape) * [cfg.sigma_v, cfg.sigma_omega]
    cands = shifted[None] + noise
    cands[..., 0] = np.clip(cands[..., 0], -cfg.v_max, cfg.v_max)
    cands[..., 1] = np.clip(cands[..., 1], -cfg.omega_max, cfg.omega_max)
    return cands


def fmm_suggested_control(state: State, field: VectorField, mesh: TriangleMesh, cfg: PlannerConfig) -> Control:
    """Proportional controller toward the field heading at the state."""
    dirs, ok = directions_at(field, mesh, np.asarray(state.position)[None])
    if not ok[0]:
        raise NoDirectionError(f"no guidance direction at {state.position}")
    psi_des = math.atan2(dirs[0, 1], dirs[0, 0])
    err = wrap_angle(psi_des - state.psi)
    return Control(cfg.beta * cfg.v_max, cfg.k_p * err, v_max=cfg.v_max, omega_max=cfg.omega_max)


def _biased_picker(field, mesh, cfg):
    """Per-step control chooser blending the field suggestion with the
    pre-drawn uniform controls already sitting in the rollout's U buffer."""

    def pick(k, states, desc, alive, default):
        dirs, ok = directions_at(field, mesh, states[:, :3])
        psi_des = np.arctan2(dirs[:, 1], dirs[:, 0])
        err = wrap_angle(psi_des - states[:, 5])
        u = np.empty_like(default)
        u[:, 0] = cfg.alpha_fmm * (cfg.beta * cfg.v_max) + (1.0 - cfg.alpha_fmm) * default[:, 0]
        u[:, 1] = (
            cfg.alpha_fmm * np.clip(cfg.k_p * err, -cfg.omega_max, cfg.omega_max)
            + (1.0 - cfg.alpha_fmm) * default[:, 1]
        )
        u[~ok] = default[~ok]
        u[:, 0] = np.clip(u[:, 0], -cfg.v_max, cfg.v_max)
        u[:, 1] = np.clip(u[:, 1], -cfg.omega_max, cfg.omega_max)
        return u

    return pick


def _uniform_controls(count, cfg, rng):
    u = rng.uniform(-1.0, 1.0, size=(count, cfg.horizon, 2))
    u[..., 0] *= cfg.v_max
    u[..., 1] *= cfg.omega_max
    return u


def fmm_biased_candidates(x0: State, field: VectorField, mesh: TriangleMesh, ctx: RolloutContext,
                          model, count: int, cfg: PlannerConfig, rng) -> np.ndarray:
    """Field-guided candidate sequences, built step-by-step on the simulated
    states so each suggestion is queried where the vehicle would actually
    be.  Steps without a guidance direction fall back to their random draw.
    Returns (count, H, 2)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    u_rand = _uniform_controls(count, cfg, rng)
    rb = rollout_batch(x0, u_rand, mesh, ctx, model, cfg.dt, control_fn=_biased_picker(field, mesh, cfg))
    return rb.controls


def score_rollouts(states, deviations, flags, field: VectorField, mesh: TriangleMesh,
                   objectives: ObjectiveParams | None = None):
    """Both objectives for a candidate-major rollout batch.

    states (N, H+1, 6), deviations (N, H+1, 2), flags (N, H+1) off-mesh or
    lethal markers.  Returns (f1, f2, hard) over the N candidates.
    """
    obj = objectives or ObjectiveParams()
    states = np.asarray(states, dtype=float)
    N, H1 = states.shape[:2]
    dirs, okd = directions_at(field, mesh, states[:, 1:, :3].reshape(-1, 3))
    f1, hard1 = alignment_terms(
        states[..., :3], dirs.reshape(N, H1 - 1, 3), okd.reshape(N, H1 - 1),
        field.goal, field.d_max, obj.scale_exponent,
    )
    f2, hard2 = stability_terms(deviations, flags, obj)
    return f1, f2, hard1 | hard2


def select_best(f1, f2, hard, eps: float):
    """Feasible-set argmin of f1; ties break on lower f2, then lower index.
    Returns None when nothing is feasible."""
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    feasible = ~np.asarray(hard, dtype=bool) & (f2 <= eps)
    idx = np.flatnonzero(feasible)
    if not len(idx):
        return None
    order = np.lexsort((idx, f2[idx], f1[idx]))
    return int(idx[order[0]])


def fallback_maneuver(state: State, field: VectorField, mesh: TriangleMesh, cfg: PlannerConfig) -> Control:
    """Rotate in place toward the field heading at half the turn budget;
    full stop when no direction exists.

    The turn rate is floored so the scan keeps sweeping past alignment:
    fallback only fires when every candidate was infeasible, and a zero
    rotation there would freeze the vehicle against the same blocked
    heading forever.
    """
    dirs, ok = directions_at(field, mesh, np.asarray(state.position)[None])
    if not ok[0]:
        return Control(0.0, 0.0, v_max=cfg.v_max, omega_max=cfg.omega_max)
    err = wrap_angle(math.atan2(dirs[0, 1], dirs[0, 0]) - state.psi)
    mag = min(max(cfg.k_p * abs(err), 0.25 * cfg.omega_max), 0.5 * cfg.omega_max)
    return Control(0.0, math.copysign(mag, err) if err else mag,
                   v_max=cfg.v_max, omega_max=cfg.omega_max)


def plan_step(x_k: State, field: VectorField, mesh: TriangleMesh, ctx: RolloutContext,
              model=None, prev_controls=None, cfg: PlannerConfig | None = None, rng=None,
              fixed_epsilon: float | None = None,
              objectives: ObjectiveParams | None = None) -> PlanStepResult:
    """One receding-horizon planning step.

    Candidate layout is deterministic: warm-started sequences (when
    prev_controls is given) occupy the first half of the table, guided
    sequences the rest; all random draws come from rng in that fixed order,
    so results are independent of any evaluation parallelism.
    """
    t0 = time.perf_counter()
    cfg = cfg or PlannerConfig()
    obj = objectives or ObjectiveParams()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if getattr(x_k, "off_mesh", False):
        raise PlanningError("planning from an off-mesh state")
    pos = np.asarray(x_k.position, dtype=float)
    if mesh.locate_faces(pos[None, :2])[0][0] < 0:
        raise PlanningError(f"planning position {pos[:2]} is off-mesh")

    if fixed_epsilon is not None:
        eps = float(fixed_epsilon)
    else:
        d0, ok0 = descriptors_at(mesh, ctx.cache, pos[None], radius=ctx.descriptor_radius)
        eps = adaptive_epsilon(d0[0] if ok0[0] else np.zeros(7), cfg)

    n_warm = cfg.n_cand // 2 if prev_controls is not None else 0
    n_bias = cfg.n_cand - n_warm
    rollouts = []
    if n_warm:
        u_warm = warm_start_candidates(prev_controls, n_warm, cfg, rng)
        rollouts.append(rollout_batch(x_k, u_warm, mesh, ctx, model, cfg.dt))
    u_rand = _uniform_controls(n_bias, cfg, rng)
    rollouts.append(
        rollout_batch(x_k, u_rand, mesh, ctx, model, cfg.dt, control_fn=_biased_picker(field, mesh, cfg))
    )

    states = np.concatenate([rb.states for rb in rollouts])
    controls = np.concatenate([rb.controls for rb in rollouts])
    deviations = np.concatenate([rb.deviations for rb in rollouts])
    flags = np.concatenate([rb.off_mesh | rb.lethal for rb in rollouts])

    f1, f2, hard = score_rollouts(states, deviations, flags, field, mesh, obj)
    feasible = ~hard & (f2 <= eps)

    best = select_best(f1, f2, hard, eps)
    if best is None:
        control = fallback_maneuver(x_k, field, mesh, cfg)
        best_controls = None
    else:
        assert not np.any(
            feasible & (f1 < f1[best] - 1e-12) & (f2 < f2[best] - 1e-12)
        ), "selected candidate is dominated within the feasible set"
        best_controls = controls[best]
        control = Control(best_controls[0, 0], best_controls[0, 1],
                          v_max=cfg.v_max, omega_max=cfg.omega_max)

    return PlanStepResult(
        control=control,
        best_controls=best_controls,
        best_index=best,
        feasible_count=int(feasible.sum()),
        epsilon=eps,
        f1=f1,
        f2=f2,
        feasible=feasible,
        fallback=best is None,
        time_ms=(time.perf_counter() - t0) * 1e3,
    )


def _execute_step(state, control, mesh, ctx, model, dt, slip=None):
    """Apply one control for real; returns (next state row, dev row, flags).

    slip, when given, injects the synthetic unmodeled dynamics (the same
    roll/pitch cross-coupling and yaw drift used to train the residual
    model) into the executed state, so runs exhibit a plan-vs-execution
    gap while planner rollouts stay on the modeled dynamics.
    """
    rb = rollout_batch(state, np.array([[[control.u0, control.u1]]]), mesh, ctx, model, dt)
    nxt = State.from_array(rb.states[0, 1], off_mesh=bool(rb.off_mesh[0, 1]))
    dev = rb.deviations[0, 1]
    if slip is not None and not nxt.off_mesh:
        d_theta = slip.pitch_slip * nxt.phi
        d_phi = slip.roll_slip * nxt.theta
        nxt = State(nxt.x, nxt.y, nxt.z, nxt.phi + d_phi, nxt.theta + d_theta,
                    nxt.psi + slip.yaw_drift * control.u0 * dt)
        dev = wrap_angle(dev + np.array([d_theta, d_phi]))
    return nxt, dev, bool(rb.lethal[0, 1])


def start_pose(mesh: TriangleMesh, x: float, y: float, psi: float = 0.0) -> State:
    """Terrain-conformed pose at planar (x, y): snapped height, gradient
    roll/pitch, given yaw."""
    from .dynamics import terrain_roll_pitch
    from .mesh import terrain_gradients

    h, fid = terrain_heights(mesh, np.array([[x, y]]))
    if fid[0] < 0 or np.isnan(h[0]):
        raise PlanningError(f"start ({x}, {y}) is off-mesh")
    g, _ = terrain_gradients(mesh, np.array([[x, y]]))
    phi, theta = terrain_roll_pitch(g[0])
    return State(x, y, float(h[0]), float(phi), float(theta), psi)


def receding_horizon_run(x_start: State, p_goal, mesh: TriangleMesh, cfg: PlannerConfig | None = None,
                         model=None, *, method: str = "eps-adaptive", ctx: RolloutContext | None = None,
                         field: VectorField | None = None, objectives: ObjectiveParams | None = None,
                         cost_params: VertexCostParams | None = None,
                         fixed_epsilon: float = 25.0, mppi_cfg=None,
                         exec_slip=None) -> RunResult:
    """Plan-execute loop from a start pose to a goal point.

    method picks the per-step planner: "eps-adaptive" (terrain-adaptive
    bound), "eps-fixed" (constant fixed_epsilon), or "mppi".  Terminates
    SUCCESS inside delta_term of the goal, FAILURE-TIPOVER past the hard
    tilt limit, FAILURE-OFFMESH if execution leaves the mesh, TIMEOUT at
    max_iters; a start outside the reachable field is INFEASIBLE and takes
    no step.
    """
    cfg = cfg or PlannerConfig()
    obj = objectives or ObjectiveParams()
    if method not in ("eps-adaptive", "eps-fixed", "mppi"):
        raise ValueError(f"unknown method {method!r}")
    goal = np.asarray(p_goal, dtype=float)
    gh, gfid = terrain_heights(mesh, goal[None, :2])
    if gfid[0] >= 0 and np.isfinite(gh[0]):
        goal = np.array([goal[0], goal[1], float(gh[0])])

    if ctx is None:
        cache = vertex_curvatures(mesh)
        costs = vertex_costs(mesh, cache, cost_params)
        ctx = RolloutContext(cache=cache, costs=costs)
    if field is None:
        try:
            field = compute_field(mesh, goal, ctx.costs if ctx.costs is not None
                                  else vertex_costs(mesh, ctx.cache, cost_params))
        except UnreachableGoalError:
            return RunResult(INFEASIBLE, x_start.as_array()[None], np.zeros((0, 2)),
                             np.zeros((1, 2)), np.zeros(0), goal,
                             float(np.linalg.norm(x_start.position - goal)))

    straight = float(np.linalg.norm(np.asarray(x_start.position) - goal))
    _, ok0 = directions_at(field, mesh, np.asarray(x_start.position)[None])
    if not ok0[0] and straight >= cfg.delta_term:
        return RunResult(INFEASIBLE, x_start.as_array()[None], np.zeros((0, 2)),
                         np.zeros((1, 2)), np.zeros(0), goal, straight)

    state = x_start
    states = [x_start.as_array()]
    controls = []
    devs = [np.zeros(2)]
    times = []
    log = []
    prev = None
    nominal = None
    outcome = TIMEOUT

    for it in range(cfg.max_iters):
        if np.linalg.norm(state.position[:2] - goal[:2]) < cfg.delta_term:
            outcome = SUCCESS
            break
        rng = np.random.default_rng((cfg.seed, it))
        entry = {"iteration": it, "state": [round(v, 9) for v in state.as_array()]}
        if method == "mppi":
            from .baselines import mppi_plan_step

            control, nominal, info = mppi_plan_step(state, nominal, mppi_cfg, mesh, ctx,
                                                    field, model, rng, planner_cfg=cfg,
                                                    objectives=obj)
            times.append(info["time_ms"])
            entry.update(control=[control.u0, control.u1], **{k: v for k, v in info.items()})
        else:
            res = plan_step(state, field, mesh, ctx, model, prev, cfg, rng,
                            fixed_epsilon=fixed_epsilon if method == "eps-fixed" else None,
                            objectives=obj)
            control = res.control
            prev = res.best_controls
            times.append(res.time_ms)
            entry.update(
                control=[control.u0, control.u1],
                epsilon=round(res.epsilon, 9),
                feasible=res.feasible_count,
                f1_best=None if res.best_index is None else round(float(res.f1[res.best_index]), 9),
                f2_best=None if res.best_index is None else round(float(res.f2[res.best_index]), 9),
                fallback=res.fallback,
                time_ms=res.time_ms,
            )
        log.append(entry)

        state, dev, _ = _execute_step(state, control, mesh, ctx, model, cfg.dt,
                                      slip=exec_slip)
        states.append(state.as_array())
        controls.append([control.u0, control.u1])
        devs.append(dev)
        if state.off_mesh:
            outcome = FAILURE_OFFMESH
            break
        if np.abs(dev).max() >= obj.alpha_max:
            outcome = FAILURE_TIPOVER
            break

    return RunResult(
        outcome,
        np.array(states),
        np.array(controls).reshape(-1, 2),
        np.array(devs),
        np.array(times),
        goal,
        straight,
        log=log,
    )
