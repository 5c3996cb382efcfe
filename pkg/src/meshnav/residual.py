"""Sparse-GP residual dynamics: training, prediction, and a synthetic world.

Six independent subset-of-regressors GPs (one per state-delta dimension)
share a common inducing set picked by k-means in standardized feature space.
Prediction needs only the M precomputed weights per dimension, so it is
cheap enough to sit inside the planner's candidate rollouts.

The synthetic "slip world" stands in for logged robot data: it perturbs the
nominal step with slope-proportional roll/pitch offsets and a
velocity-proportional yaw drift, which is exactly the kind of structured
error the residual is meant to absorb.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import LinAlgError, cholesky, solve_triangular

from .dynamics import State, nominal_step, residual_features
from .mesh import terrain_heights
from .objectives import wrap_angle

JITTERS = (1e-8, 1e-6, 1e-4)
OUTPUT_DIMS = 6
FORMAT_VERSION = 1


class ResidualTrainingError(RuntimeError):
    """Raised when the inducing Gram matrix stays rank-deficient after the
    full jitter escalation."""


def _se_kernel(a, b, lengthscales, signal_var):
    d = (a[:, None, :] - b[None, :, :]) / lengthscales
    return signal_var * np.exp(-0.5 * np.einsum("pmf,pmf->pm", d, d))


def _chol_with_jitter(mat):
    scale = max(float(np.mean(np.diag(mat))), 1.0)
    for jit in JITTERS:
        try:
            return cholesky(mat + jit * scale * np.eye(len(mat)), lower=True)
        except LinAlgError:
            continue
    raise ResidualTrainingError(
        f"inducing Gram matrix is rank-deficient even with jitter {JITTERS[-1]}"
    )


@dataclass
class DimGP:
    """One output dimension: ARD SE kernel hyperparameters plus the
    predictive weights over the shared inducing set."""

    lengthscales: np.ndarray  # (F,) > 0
    signal_var: float
    noise_var: float
    weights: np.ndarray       # (M,)
    chol_p: np.ndarray        # (M, M) lower factor of noise*Kmm + Kmn@Knm

    def __post_init__(self):
        if np.any(self.lengthscales <= 0) or self.noise_var <= 0 or self.signal_var <= 0:
            raise ValueError("kernel hyperparameters must be positive")


@dataclass
class ResidualModel:
    inducing: np.ndarray      # (M, F) standardized
    feat_mean: np.ndarray     # (F,)
    feat_scale: np.ndarray    # (F,)
    dims: list                # 6 DimGP
    full_state: bool = False

    @property
    def n_features(self) -> int:
        return self.inducing.shape[1]

    def _standardize(self, feats):
        f = np.atleast_2d(np.asarray(feats, dtype=float))
        if f.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {f.shape[1]}")
        return (f - self.feat_mean) / self.feat_scale

    def predict(self, feats):
        """Posterior mean residual(s): (F,) -> (6,) or (P, F) -> (P, 6)."""
        fs = self._standardize(feats)
        out = np.empty((len(fs), OUTPUT_DIMS))
        for j, gp in enumerate(self.dims):
            k = _se_kernel(fs, self.inducing, gp.lengthscales, gp.signal_var)
            out[:, j] = k @ gp.weights
        return out[0] if np.asarray(feats).ndim == 1 else out

    def predict_var(self, feats):
        """Posterior variance per output dim (same shape rules as predict).
        Exposed for diagnostics; the planner consumes the mean only."""
        fs = self._standardize(feats)
        out = np.empty((len(fs), OUTPUT_DIMS))
        for j, gp in enumerate(self.dims):
            k = _se_kernel(fs, self.inducing, gp.lengthscales, gp.signal_var)
            v = solve_triangular(gp.chol_p, k.T, lower=True)
            out[:, j] = gp.noise_var * np.sum(v * v, axis=0)
        return out[0] if np.asarray(feats).ndim == 1 else out


def residual_predict(model: ResidualModel, features):
    """Mean residual 6-vector at a feature vector (batch rows allowed)."""
    return model.predict(features)


# ---------------------------------------------------------------------------
# training


def _as_arrays(dataset):
    if isinstance(dataset, tuple) and len(dataset) == 2:
        X, Y = dataset
    else:
        X = np.array([np.asarray(f, dtype=float) for f, _ in dataset])
        Y = np.array([np.asarray(d, dtype=float) for _, d in dataset])
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[1] != OUTPUT_DIMS:
        raise ValueError(f"targets must have {OUTPUT_DIMS} columns, got {Y.shape[1]}")
    if len(X) != len(Y):
        raise ValueError("feature/target row counts differ")
    return X, Y


def _median_lengthscales(Xs, rng):
    """Per-dimension median pairwise distance, scaled by sqrt(F) so the
    summed ARD exponent lands near unity at a typical pair."""
    n = len(Xs)
    sub = Xs if n <= 500 else Xs[rng.choice(n, 500, replace=False)]
    i, j = np.triu_indices(len(sub), k=1)
    diff = np.abs(sub[i] - sub[j])
    ls = np.median(diff, axis=0) * np.sqrt(Xs.shape[1])
    return np.where(ls > 1e-3, ls, 1.0)


def _sor_nll(Xs, y, Z, log_ls, log_sv, log_nv):
    """Negative log marginal likelihood of the projected sparse model."""
    ls, sv, nv = np.exp(log_ls), np.exp(log_sv), np.exp(log_nv)
    kmm = _se_kernel(Z, Z, ls, sv)
    kmn = _se_kernel(Z, Xs, ls, sv)
    try:
        lm = _chol_with_jitter(kmm)
    except ResidualTrainingError:
        return np.inf
    a = solve_triangular(lm, kmn, lower=True) / np.sqrt(nv)
    g = np.eye(len(Z)) + a @ a.T
    try:
        lg = cholesky(g, lower=True)
    except LinAlgError:
        return np.inf
    beta = solve_triangular(lg, a @ y, lower=True)
    n = len(y)
    quad = (y @ y - beta @ beta) / nv
    logdet = n * np.log(nv) + 2.0 * np.sum(np.log(np.diag(lg)))
    return 0.5 * (quad + logdet + n * np.log(2.0 * np.pi))


def _search_dim(Xs, y, Z, ls0, sv0, nv0, fix_noise):
    """Multi-start coordinate descent on the log hyperparameters."""
    best_p, best_v = None, np.inf
    steps = (np.log(2.0), -np.log(2.0), np.log(1.25), -np.log(1.25))
    for start_fac in (1.0, 0.3):
        p = np.log(np.concatenate([ls0 * start_fac, [sv0, nv0]]))
        free = len(p) if not fix_noise else len(p) - 1
        cur = _sor_nll(Xs, y, Z, p[:-2], p[-2], p[-1])
        for _ in range(2):
            for i in range(free):
                for s in steps:
                    trial = p.copy()
                    trial[i] += s
                    v = _sor_nll(Xs, y, Z, trial[:-2], trial[-2], trial[-1])
                    if v < cur - 1e-10:
                        p, cur = trial, v
        if cur < best_v:
            best_p, best_v = p, cur
    ls, sv, nv = np.exp(best_p[:-2]), float(np.exp(best_p[-2])), float(np.exp(best_p[-1]))
    return ls, sv, nv


def train_residual(dataset, M: int, seed: int = 0, mode: str = "search", noise_var: float | None = None) -> ResidualModel:
    """Fit the six-dimension sparse residual model.

    dataset : list of (features, delta6) pairs, or an (X, Y) array tuple.
    M : inducing-point count, 1 <= M <= len(dataset).
    mode : "search" (default) refines hyperparameters by multi-start
        coordinate descent on the sparse likelihood; "fast" pins
        median-heuristic length-scales for quick turnaround.
    noise_var : optional fixed observation noise shared by every output.
    """
    if mode not in ("fast", "search"):
        raise ValueError(f"unknown training mode {mode!r}")
    X, Y = _as_arrays(dataset)
    n, F = X.shape
    if not 1 <= M <= n:
        raise ValueError(f"need 1 <= M <= {n}, got M={M}")

    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 1e-9, sd, 1.0)
    Xs = (X - mu) / sd

    rng = np.random.default_rng(seed)
    Z, _ = kmeans2(Xs, M, minit="++", rng=rng)
    ls0 = _median_lengthscales(Xs, rng)

    dims = []
    for j in range(OUTPUT_DIMS):
        y = Y[:, j]
        sv = max(float(np.var(y)), 1e-10)
        nv = noise_var if noise_var is not None else max(1e-8, 0.01 * sv)
        ls = ls0.copy()
        if mode == "search" and np.var(y) > 1e-12:
            ls, sv, nv = _search_dim(Xs, y, Z, ls0, sv, nv, fix_noise=noise_var is not None)
        kmm = _se_kernel(Z, Z, ls, sv)
        kmn = _se_kernel(Z, Xs, ls, sv)
        p = nv * kmm + kmn @ kmn.T
        lp = _chol_with_jitter(p)
        rhs = kmn @ y
        w = solve_triangular(lp.T, solve_triangular(lp, rhs, lower=True), lower=False)
        dims.append(DimGP(ls, float(sv), float(nv), w, lp))

    return ResidualModel(inducing=Z, feat_mean=mu, feat_scale=sd, dims=dims, full_state=F >= 15)


# ---------------------------------------------------------------------------
# persistence


def save_residual(model: ResidualModel, path) -> None:
    """Persist to a self-describing .npz archive."""
    np.savez(
        path,
        format_version=np.array(FORMAT_VERSION),
        inducing=model.inducing,
        feat_mean=model.feat_mean,
        feat_scale=model.feat_scale,
        full_state=np.array(model.full_state),
        lengthscales=np.stack([g.lengthscales for g in model.dims]),
        signal_var=np.array([g.signal_var for g in model.dims]),
        noise_var=np.array([g.noise_var for g in model.dims]),
        weights=np.stack([g.weights for g in model.dims]),
        chol_p=np.stack([g.chol_p for g in model.dims]),
    )


def load_residual(path) -> ResidualModel:
    with np.load(path) as z:
        ver = int(z["format_version"])
        if ver != FORMAT_VERSION:
            raise ValueError(f"unsupported residual model version {ver}")
        dims = [
            DimGP(
                z["lengthscales"][j],
                float(z["signal_var"][j]),
                float(z["noise_var"][j]),
                z["weights"][j],
                z["chol_p"][j],
            )
            for j in range(OUTPUT_DIMS)
        ]
        return ResidualModel(
            inducing=z["inducing"],
            feat_mean=z["feat_mean"],
            feat_scale=z["feat_scale"],
            dims=dims,
            full_state=bool(z["full_state"]),
        )


def save_dataset_csv(path, X, Y) -> None:
    """CSV rows: feature columns f0..fN then the six delta columns."""
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    header = [f"f{i}" for i in range(X.shape[1])] + ["dx", "dy", "dz", "dphi", "dtheta", "dpsi"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for xr, yr in zip(X, Y):
            w.writerow([f"{v:.17g}" for v in np.concatenate([xr, yr])])


def load_dataset_csv(path):
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    data = np.atleast_2d(data)
    return data[:, :-OUTPUT_DIMS], data[:, -OUTPUT_DIMS:]


# ---------------------------------------------------------------------------
# synthetic ground-truth world


@dataclass(frozen=True)
class SlipParams:
    """Structured model error of the synthetic world: roll/pitch offsets
    proportional to the local terrain pitch/roll plus a yaw drift scaling
    with commanded speed."""

    roll_slip: float = 0.05
    pitch_slip: float = 0.05
    yaw_drift: float = 0.02


def slip_step(state: State, u, mesh, params: SlipParams, dt: float, grad_step: float = 0.05) -> State:
    """Ground-truth step: nominal kinematics plus the slip offsets."""
    nom = nominal_step(state, u, mesh, dt, grad_step)
    if nom.off_mesh:
        return nom
    return State(
        nom.x,
        nom.y,
        nom.z,
        wrap_angle(nom.phi + params.roll_slip * nom.theta),
        wrap_angle(nom.theta + params.pitch_slip * nom.phi),
        wrap_angle(nom.psi + params.yaw_drift * u.u0 * dt),
    )


def slip_dataset(mesh, ctx, n_samples: int, seed: int = 0, params: SlipParams | None = None,
                 dt: float = 0.1, full_state: bool = False):
    """Roll random drives through the slip world and log residual pairs.

    Each sample is (features at the visited true state, true_next - nominal_next).
    Returns (X (n, F), Y (n, 6)).
    """
    from .descriptors import descriptors_at
    from .dynamics import Control

    p = params or SlipParams()
    rng = np.random.default_rng(seed)
    lo_x, hi_x = mesh.vertices[:, 0].min(), mesh.vertices[:, 0].max()
    lo_y, hi_y = mesh.vertices[:, 1].min(), mesh.vertices[:, 1].max()
    margin = 0.05 * max(hi_x - lo_x, hi_y - lo_y)

    X, Y = [], []
    state = None
    steps_left = 0
    u = Control(0.0, 0.0)
    while len(X) < n_samples:
        if state is None or state.off_mesh:
            x = rng.uniform(lo_x + margin, hi_x - margin)
            y = rng.uniform(lo_y + margin, hi_y - margin)
            h, fid = terrain_heights(mesh, np.array([[x, y]]))
            if fid[0] < 0 or np.isnan(h[0]):
                continue
            state = State(x, y, float(h[0]), psi=rng.uniform(-np.pi, np.pi))
            steps_left = 0
        if steps_left == 0:
            u = Control(rng.uniform(0.2, 1.5), rng.uniform(-1.0, 1.0))
            steps_left = int(rng.integers(5, 15))
        desc, ok = descriptors_at(mesh, ctx.cache, np.asarray(state.position)[None], radius=ctx.descriptor_radius)
        if not ok[0]:
            state = None
            continue
        true_next = slip_step(state, u, mesh, p, dt, ctx.grad_step)
        nom_next = nominal_step(state, u, mesh, dt, ctx.grad_step)
        if true_next.off_mesh:
            state = None
            continue
        X.append(residual_features(state, u, desc[0], full_state=full_state))
        Y.append(true_next.as_array() - nom_next.as_array())
        state = true_next
        steps_left -= 1
    return np.array(X), np.array(Y)
