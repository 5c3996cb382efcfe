"""Discrete-time car-like vehicle model on mesh terrain.

The nominal update advances the planar pose with a cos(pitch) attenuated
unicycle step, snaps z to the surface, and re-derives roll/pitch from the
local height gradient.  A learned residual (any object with a ``predict``
method over feature rows and a ``full_state`` flag) can be added on top of
each nominal step.

Everything rolls through one batched core, `rollout_batch`, so a single
`simulate_forward` call and the planner's 100-candidate evaluation are the
same code path with N = 1 vs N = 100.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .descriptors import CurvatureCache, TerrainDescriptor, descriptors_at
from .field import VectorField, VertexCosts
from .mesh import TriangleMesh, terrain_gradients, terrain_heights
from .objectives import terrain_aligned_orientation, wrap_angle

V_MAX_DEFAULT = 1.5
OMEGA_MAX_DEFAULT = 3.22


@dataclass(frozen=True)
class State:
    """Vehicle pose [x y z phi theta psi]; angles wrapped to (-pi, pi].

    off_mesh marks a pose produced by a step whose target position left the
    mesh; such states keep their last valid z/roll/pitch.
    """

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    phi: float = 0.0
    theta: float = 0.0
    psi: float = 0.0
    off_mesh: bool = False

    def __post_init__(self):
        for name in ("phi", "theta", "psi"):
            object.__setattr__(self, name, wrap_angle(getattr(self, name)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.phi, self.theta, self.psi])

    @staticmethod
    def from_array(a, off_mesh: bool = False) -> "State":
        a = np.asarray(a, dtype=float)
        return State(*(float(v) for v in a[:6]), off_mesh=off_mesh)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class Control:
    """(u0, u1) = linear / angular velocity, clamped to the stored limits."""

    u0: float
    u1: float
    v_max: float = V_MAX_DEFAULT
    omega_max: float = OMEGA_MAX_DEFAULT

    def __post_init__(self):
        if self.v_max <= 0 or self.omega_max <= 0:
            raise ValueError("control limits must be positive")
        object.__setattr__(self, "u0", float(np.clip(self.u0, -self.v_max, self.v_max)))
        object.__setattr__(self, "u1", float(np.clip(self.u1, -self.omega_max, self.omega_max)))

    def as_array(self) -> np.ndarray:
        return np.array([self.u0, self.u1])


@dataclass
class Trajectory:
    """One rollout: H+1 states, H controls, per-state terrain context.

    deviations holds wrapped (dtheta, dphi) between the vehicle orientation
    and the terrain-aligned orientation of the local descriptor normal;
    rows with an invalid descriptor are zeroed and flagged instead.
    """

    states: np.ndarray       # (H+1, 6) rows [x y z phi theta psi]
    controls: np.ndarray     # (H, 2) rows [u0 u1]
    descriptors: np.ndarray  # (H+1, 7) descriptor vectors, zeros where invalid
    deviations: np.ndarray   # (H+1, 2) wrapped (dtheta, dphi)
    off_mesh: np.ndarray     # (H+1,) bool
    lethal: np.ndarray       # (H+1,) bool
    desc_valid: np.ndarray | None = None  # (H+1,) bool

    def __post_init__(self):
        if len(self.states) != len(self.controls) + 1 or len(self.states) != len(self.descriptors):
            raise ValueError("states/controls/descriptors lengths are inconsistent")

    @property
    def horizon(self) -> int:
        return len(self.controls)

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :3]

    def state(self, i: int) -> State:
        return State.from_array(self.states[i], off_mesh=bool(self.off_mesh[i]))


@dataclass(frozen=True)
class RolloutContext:
    """Immutable terrain context shared by every candidate rollout."""

    cache: CurvatureCache
    costs: VertexCosts | None = None
    field: VectorField | None = None
    descriptor_radius: float = 0.5
    grad_step: float = 0.05
    height_mode: str = "vertical-solve"


@dataclass
class BatchRollout:
    """Candidate-major rollout arrays; axis 0 indexes candidates."""

    states: np.ndarray       # (N, H+1, 6)
    controls: np.ndarray     # (N, H, 2)
    descriptors: np.ndarray  # (N, H+1, 7)
    deviations: np.ndarray   # (N, H+1, 2)
    off_mesh: np.ndarray     # (N, H+1)
    lethal: np.ndarray       # (N, H+1)
    desc_valid: np.ndarray   # (N, H+1)

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            states=self.states[i],
            controls=self.controls[i],
            descriptors=self.descriptors[i],
            deviations=self.deviations[i],
            off_mesh=self.off_mesh[i],
            lethal=self.lethal[i],
            desc_valid=self.desc_valid[i],
        )


def terrain_roll_pitch(grad):
    """Roll/pitch of a terrain-following pose from the height gradient.

    grad : (..., 2) array of (dh/dx, dh/dy).
    Returns (phi, theta) with phi = atan2(-g_y, sqrt(1 + g_x^2)) and
    theta = atan2(g_x, sqrt(1 + g_y^2)).
    """
    g = np.asarray(grad, dtype=float)
    gx, gy = g[..., 0], g[..., 1]
    phi = np.arctan2(-gy, np.sqrt(1.0 + gx * gx))
    theta = np.arctan2(gx, np.sqrt(1.0 + gy * gy))
    if phi.ndim:
        return phi, theta
    return float(phi), float(theta)


def _advance(states, u, mesh, dt, grad_step=0.05, mode="vertical-solve"):
    """One nominal step for a batch of state rows.

    Returns (next (N, 6), on_mesh (N,), fid (N,)).  Rows whose target
    position falls off the mesh (or on a vertical face) keep their previous
    z/roll/pitch; on-mesh rows with a clipped gradient stencil fall back to
    a level orientation.
    """
    states = np.asarray(states, dtype=float)
    u = np.asarray(u, dtype=float)
    theta, psi = states[:, 4], states[:, 5]
    step = u[:, 0] * np.cos(theta) * dt
    out = states.copy()
    out[:, 0] = states[:, 0] + step * np.cos(psi)
    out[:, 1] = states[:, 1] + step * np.sin(psi)
    out[:, 5] = wrap_angle(psi + u[:, 1] * dt)
    xy = out[:, :2]
    h, fid = terrain_heights(mesh, xy, mode=mode)
    on = (fid >= 0) & ~np.isnan(h)
    if on.any():
        grad, _ = terrain_gradients(mesh, xy[on], step=grad_step, mode=mode)
        phi_t, theta_t = terrain_roll_pitch(grad)
        out[on, 2] = h[on]
        out[on, 3] = phi_t
        out[on, 4] = theta_t
    return out, on, fid


def nominal_step(state: State, u: Control, mesh: TriangleMesh, dt: float, grad_step: float = 0.05) -> State:
    """Advance one state by one control over dt on the given mesh."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    nxt, on, _ = _advance(state.as_array()[None], u.as_array()[None], mesh, dt, grad_step)
    return State.from_array(nxt[0], off_mesh=not bool(on[0]))


def _features_batch(states, u, desc, full_state=False):
    cols = np.column_stack([states[:, 3], states[:, 4], u[:, 0], u[:, 1], desc])
    if full_state:
        cols = np.column_stack([cols, states[:, 0], states[:, 1], states[:, 2], states[:, 5]])
    return cols


def residual_features(state, u, descriptor, full_state: bool = False) -> np.ndarray:
    """Feature vector for residual regression.

    Default layout (11): roll, pitch, u0, u1, then the 7 descriptor
    components; full_state appends (x, y, z, psi) for 15.  The default is
    invariant to position and yaw by construction.
    """
    s = state.as_array() if isinstance(state, State) else np.asarray(state, dtype=float)
    ua = u.as_array() if isinstance(u, Control) else np.asarray(u, dtype=float)
    d = descriptor.as_array() if isinstance(descriptor, TerrainDescriptor) else np.asarray(descriptor, dtype=float)
    return _features_batch(s[None], ua[None], d[None], full_state)[0]


def corrected_step(state, u, mesh, descriptor, model, dt, grad_step: float = 0.05) -> State:
    """nominal_step plus the model's additive residual.

    With model None this is exactly nominal_step.  The residual is applied
    after the z-snap and is not re-snapped (its dz component owns the height
    correction); angles are re-wrapped.  Steps that leave the mesh return
    the flagged nominal state uncorrected.
    """
    nxt = nominal_step(state, u, mesh, dt, grad_step)
    if model is None or nxt.off_mesh:
        return nxt
    feats = residual_features(state, u, descriptor, full_state=getattr(model, "full_state", False))
    delta = np.asarray(model.predict(feats), dtype=float).reshape(-1)[:6]
    arr = nxt.as_array() + delta
    return State.from_array(arr)


def _flags_at(mesh, ctx, pts, fid):
    """Descriptors + lethal flags for on-mesh points with known face ids."""
    desc, valid = descriptors_at(mesh, ctx.cache, pts, radius=ctx.descriptor_radius)
    lethal = ~valid
    if ctx.costs is not None:
        lethal = lethal | ctx.costs.lethal[mesh.faces[fid]].any(axis=1)
    return desc, valid, lethal


def rollout_batch(x0, U, mesh: TriangleMesh, ctx: RolloutContext, model=None, dt: float = 0.1,
                  control_fn=None) -> BatchRollout:
    """Simulate N control sequences from one start state.

    x0 : State or length-6 array; U : (N, H, 2).  Candidates that step off
    the mesh freeze at their last pose with the off-mesh flag latched; the
    physics of the remaining steps would be undefined.  A state is lethal
    when its face touches a lethal vertex or its descriptor neighborhood is
    empty.  Height lookups use the top-down face pick, so overhanging
    multi-layer terrain is not distinguished per candidate.

    control_fn, when given, rewrites the controls of step k from the
    simulated states: control_fn(k, states_k (N,6), desc_k (N,7),
    alive (N,), default (N,2)) -> (N,2).  The realized controls are what
    BatchRollout.controls reports.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x0a = x0.as_array() if isinstance(x0, State) else np.asarray(x0, dtype=float)
    U = np.array(U, dtype=float)
    if U.ndim == 2:
        U = U[None]
    N, H, _ = U.shape

    states = np.zeros((N, H + 1, 6))
    desc = np.zeros((N, H + 1, 7))
    dval = np.zeros((N, H + 1), dtype=bool)
    off = np.zeros((N, H + 1), dtype=bool)
    lethal = np.zeros((N, H + 1), dtype=bool)

    states[:, 0] = x0a
    off[:, 0] = bool(getattr(x0, "off_mesh", False))
    if not off[0, 0]:
        fid0 = mesh.locate_faces(x0a[None, :2])[0]
        if fid0[0] >= 0:
            d0, v0, l0 = _flags_at(mesh, ctx, x0a[None, :3], fid0)
            desc[:, 0], dval[:, 0], lethal[:, 0] = d0[0], v0[0], l0[0]
        else:
            off[:, 0] = True

    use_model = model is not None
    full_state = bool(getattr(model, "full_state", False)) if use_model else False

    for k in range(H):
        if control_fn is not None:
            U[:, k] = control_fn(k, states[:, k], desc[:, k], ~off[:, k], U[:, k])
        states[:, k + 1] = states[:, k]
        off[:, k + 1] = off[:, k]
        alive = np.flatnonzero(~off[:, k])
        if not len(alive):
            continue
        new, on, fid = _advance(states[alive, k], U[alive, k], mesh, dt, ctx.grad_step, ctx.height_mode)
        if use_model and on.any():
            feats = _features_batch(states[alive, k][on], U[alive, k][on], desc[alive, k][on], full_state)
            delta = np.atleast_2d(np.asarray(model.predict(feats), dtype=float))
            new[on] += delta
            new[on, 3:6] = wrap_angle(new[on, 3:6])
        states[alive, k + 1] = new
        off[alive, k + 1] = ~on
        on_rows = alive[on]
        if len(on_rows):
            d, v, l = _flags_at(mesh, ctx, states[on_rows, k + 1, :3], fid[on])
            desc[on_rows, k + 1] = d
            dval[on_rows, k + 1] = v
            lethal[on_rows, k + 1] = l

    theta_t, phi_t = terrain_aligned_orientation(desc[..., :3])
    dev = np.stack(
        [wrap_angle(states[..., 4] - theta_t), wrap_angle(states[..., 3] - phi_t)],
        axis=-1,
    )
    dev[~dval] = 0.0
    return BatchRollout(
        states=states,
        controls=U,
        descriptors=desc,
        deviations=dev,
        off_mesh=off,
        lethal=lethal,
        desc_valid=dval,
    )


def _controls_array(U):
    U = list(U) if not isinstance(U, np.ndarray) else U
    if isinstance(U, list) and U and isinstance(U[0], Control):
        return np.array([[c.u0, c.u1] for c in U])
    arr = np.asarray(U, dtype=float)
    return arr.reshape(-1, 2)


def simulate_forward(x0: State, U, mesh: TriangleMesh, ctx: RolloutContext, model=None, dt: float = 0.1) -> Trajectory:
    """Roll one control sequence (length-H list of Control or (H, 2) array)
    into a Trajectory with per-state descriptors, deviations, and flags."""
    arr = _controls_array(U)
    if len(arr) < 1:
        raise ValueError("need at least one control")
    return rollout_batch(x0, arr[None], mesh, ctx, model, dt).trajectory(0)
