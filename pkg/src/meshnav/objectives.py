"""Trajectory objectives: goal-weighted path alignment and tilt stability.

The two costs are deliberately kept as pure array math so the planner can
score a whole candidate batch with the same code that scores a single
Trajectory.  Hard violations (tip-over range, off-mesh, lethal terrain,
missing guidance direction) are reported as boolean flags next to a finite
cost value, never as floating infinities, so candidate rankings stay
total-ordered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .field import VectorField, directions_at, goal_scaling
from .mesh import TriangleMesh

if TYPE_CHECKING:  # pragma: no cover - import cycle guard, types only
    from .dynamics import Trajectory

ZERO_DISP = 1e-9


@dataclass(frozen=True)
class ObjectiveParams:
    """Tilt-penalty shape and goal-scaling exponent.

    alpha_safe : half-angle of the free cone (no penalty inside).
    alpha_max : hard tip-over threshold (violation beyond is non-negotiable).
    kappa : quadratic penalty gain between the two angles, 1/rad^2.
    scale_exponent : exponent of the goal-proximity weight s(p).
    """

    alpha_safe: float = math.radians(30.0)
    alpha_max: float = math.radians(35.0)
    kappa: float = 10.0
    scale_exponent: float = 2.0

    def __post_init__(self):
        if not (0.0 < self.alpha_safe < self.alpha_max <= math.pi / 2):
            raise ValueError(
                f"need 0 < alpha_safe < alpha_max <= pi/2, got "
                f"({self.alpha_safe}, {self.alpha_max})"
            )
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.scale_exponent <= 1:
            raise ValueError("scale_exponent must exceed 1")


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = np.pi - np.mod(np.pi - a, 2.0 * np.pi)
    return out if out.ndim else float(out)


def terrain_aligned_orientation(n):
    """Terrain-aligned (theta, phi) from surface unit normal(s) (..., 3)."""
    n = np.asarray(n, dtype=float)
    theta = np.arctan2(n[..., 1], n[..., 2])
    phi = np.arctan2(-n[..., 0], n[..., 2])
    if theta.ndim:
        return theta, phi
    return float(theta), float(phi)


def tilt_violation(delta_alpha, params: ObjectiveParams | None = None):
    """Piecewise tilt penalty: 0 inside the safe cone, quadratic ramp,
    +inf sentinel at/after the tip-over angle.  Vectorized and even."""
    p = params or ObjectiveParams()
    a = np.abs(np.asarray(delta_alpha, dtype=float))
    v = np.where(
        a >= p.alpha_max,
        np.inf,
        np.where(a <= p.alpha_safe, 0.0, p.kappa * (a - p.alpha_safe) ** 2),
    )
    return v if v.ndim else float(v)


# ---------------------------------------------------------------------------
# array-level cores shared by the per-Trajectory API and the batch planner


def alignment_terms(positions, dirs, dir_ok, goal, d_max, exponent=2.0):
    """Path-alignment cost over step displacements.

    positions : (..., H+1, 3) rollout positions.
    dirs, dir_ok : guidance directions and availability at positions 1..H,
        shaped (..., H, 3) and (..., H).
    Returns (f1 (...,), hard (...,)).  Steps with no direction contribute a
    hard flag and no cost term; zero-displacement steps count as one full
    misalignment unit weighted by s(p).
    """
    positions = np.asarray(positions, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    disp = positions[..., 1:, :] - positions[..., :-1, :]
    s = goal_scaling(positions[..., 1:, :], goal, d_max, exponent)
    nd = np.linalg.norm(disp, axis=-1)
    nf = np.linalg.norm(dirs, axis=-1)
    denom = np.where((nd > ZERO_DISP) & (nf > ZERO_DISP), nd * nf, 1.0)
    cos = np.einsum("...i,...i->...", disp, dirs) / denom
    term = np.where(nd < ZERO_DISP, 1.0, 1.0 - cos) * s
    term = np.where(dir_ok, term, 0.0)
    return term.sum(axis=-1), (~np.asarray(dir_ok, dtype=bool)).any(axis=-1)


def stability_terms(deviations, hard_flags, params: ObjectiveParams | None = None):
    """Tilt-stability cost over per-state orientation deviations.

    deviations : (..., H+1, 2) wrapped (dtheta, dphi) per state.
    hard_flags : (..., H+1) off-mesh/lethal markers folded into the verdict.
    Returns (f2 (...,), hard (...,)); f2 is the finite partial sum even when
    a tip-over term fires.
    """
    p = params or ObjectiveParams()
    dev = np.asarray(deviations, dtype=float)
    v = tilt_violation(dev[..., 0], p) + tilt_violation(dev[..., 1], p)
    blown = ~np.isfinite(v)
    f2 = np.where(blown, 0.0, v).sum(axis=-1)
    hard = blown.any(axis=-1) | np.asarray(hard_flags, dtype=bool).any(axis=-1)
    return f2, hard


# ---------------------------------------------------------------------------
# Trajectory-level API


def path_alignment_cost(
    traj: "Trajectory",
    field: VectorField,
    mesh: TriangleMesh,
    params: ObjectiveParams | None = None,
):
    """f1 of one trajectory: goal-weighted misalignment between each step
    displacement and the guidance field, summed over steps 1..H.

    Returns (f1, hard); hard is set when any visited state has no guidance
    direction.
    """
    p = params or ObjectiveParams()
    states = np.asarray(traj.states, dtype=float)
    if len(states) < 2:
        raise ValueError("trajectory needs at least 2 states")
    pts = states[1:, :3]
    dirs, ok = directions_at(field, mesh, pts)
    f1, hard = alignment_terms(
        states[None, :, :3], dirs[None], ok[None], field.goal, field.d_max, p.scale_exponent
    )
    return float(f1[0]), bool(hard[0])


def stability_cost(traj: "Trajectory", params: ObjectiveParams | None = None):
    """f2 of one trajectory plus the hard-violation verdict.

    Sums tilt violations of the wrapped (dtheta, dphi) deviations over all
    H+1 states; any infinite term, off-mesh state, or lethal state makes the
    trajectory a hard violation while f2 stays the finite partial sum.
    """
    p = params or ObjectiveParams()
    flags = np.asarray(traj.off_mesh, dtype=bool) | np.asarray(traj.lethal, dtype=bool)
    f2, hard = stability_terms(np.asarray(traj.deviations)[None], flags[None], p)
    return float(f2[0]), bool(hard[0])
