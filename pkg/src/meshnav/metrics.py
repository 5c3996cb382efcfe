"""Episode records and benchmark metrics.

A RunResult captures everything one receding-horizon episode produced; the
metric layer turns per-method result lists into the summary table used by
the benchmark harness (success rate, path-length overhead, orientation
deviation, and the 0.5/0.5 trade-off score).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SUCCESS = "SUCCESS"
FAILURE_TIPOVER = "FAILURE-TIPOVER"
FAILURE_OFFMESH = "FAILURE-OFFMESH"
TIMEOUT = "TIMEOUT"
INFEASIBLE = "INFEASIBLE"
OUTCOMES = (SUCCESS, FAILURE_TIPOVER, FAILURE_OFFMESH, TIMEOUT, INFEASIBLE)

PHI_REF_DEG = 45.0   # fixed normalization bounds for single-method batches
DELTA_REF_M = 20.0


def path_length(states) -> float:
    """Total polyline length of executed positions (states (K+1, >=3))."""
    pts = np.asarray(states, dtype=float)[:, :3]
    if len(pts) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


@dataclass
class RunResult:
    """One episode: outcome, the executed trail, and metric inputs."""

    outcome: str
    states: np.ndarray          # (K+1, 6) executed poses
    controls: np.ndarray        # (K, 2) executed controls
    deviations: np.ndarray      # (K+1, 2) wrapped (dtheta, dphi) on the trail
    plan_times_ms: np.ndarray   # (K,) per-iteration planning wall time
    goal: np.ndarray            # (3,)
    straight_line: float        # start-goal distance, m
    log: list = field(default_factory=list)  # per-iteration dict records

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))

    @property
    def traveled(self) -> float:
        return path_length(self.states)

    @property
    def phi_max_deg(self) -> float:
        """Largest orientation deviation (either axis) along the trail."""
        if self.deviations is None or len(self.deviations) == 0:
            return 0.0
        return float(np.degrees(np.abs(self.deviations).max()))

    @property
    def tip_over(self) -> bool:
        return self.outcome == FAILURE_TIPOVER

    @property
    def success(self) -> bool:
        return self.outcome == SUCCESS

    @property
    def delta_l(self) -> float:
        """Path-length overhead vs the straight start-goal line.

        Runs legitimately stop within the arrival tolerance, so the route is
        first completed with the final straight hop to the goal; the triangle
        inequality then guarantees the overhead is non-negative.
        """
        gap = float(np.linalg.norm(self.states[-1, :3] - self.goal))
        d = self.traveled + gap - self.straight_line
        assert d >= -1e-6, f"completed route {self.traveled + gap} below straight {self.straight_line}"
        return max(d, 0.0)


@dataclass
class MetricsSummary:
    method: str
    n_runs: int                 # feasible runs entering the denominators
    n_infeasible: int
    success_rate: float         # percent of feasible runs
    mean_delta_l: float         # m, successful runs only (nan if none)
    mean_phi_max_deg: float     # averaged over feasible runs
    tradeoff: float             # 0.5 phi_norm + 0.5 delta_norm
    mean_plan_ms: float
    tip_over_count: int


def _aggregate(method, results):
    feasible = [r for r in results if r.outcome != INFEASIBLE]
    n_inf = len(results) - len(feasible)
    if not feasible:
        raise ValueError(f"method {method!r} has no feasible runs to summarize")
    succ = [r for r in feasible if r.success]
    rate = 100.0 * len(succ) / len(feasible)
    mean_dl = float(np.mean([r.delta_l for r in succ])) if succ else math.nan
    mean_phi = float(np.mean([r.phi_max_deg for r in feasible]))
    times = np.concatenate([np.atleast_1d(r.plan_times_ms) for r in feasible if len(np.atleast_1d(r.plan_times_ms))] or [np.array([])])
    mean_ms = float(times.mean()) if times.size else 0.0
    tips = sum(r.tip_over for r in feasible)
    return MetricsSummary(method, len(feasible), n_inf, rate, mean_dl, mean_phi, math.nan, mean_ms, tips)


def _minmax(values):
    lo, hi = min(values), max(values)
    if hi - lo <= 1e-12:
        return [0.0 for _ in values]
    return [(v - lo) / (hi - lo) for v in values]


def compute_metrics(results, normalization: str = "batch"):
    """Summaries per method with the cross-method trade-off score.

    results : dict {method: [RunResult, ...]} or a plain list (single
        anonymous method).
    normalization : "batch" min-max normalizes mean phi_max / mean delta_L
        across the supplied methods; "fixed" (automatic for single-method
        input) divides by the reference bounds (45 deg, 20 m) instead.
    Returns {method: MetricsSummary} for dict input, a bare MetricsSummary
    for list input.
    """
    single = not isinstance(results, dict)
    table = {"run": list(results)} if single else results
    if normalization not in ("batch", "fixed"):
        raise ValueError(f"unknown normalization {normalization!r}")
    summaries = {m: _aggregate(m, rs) for m, rs in table.items()}

    methods = list(summaries)
    phis = [summaries[m].mean_phi_max_deg for m in methods]
    dls = [0.0 if math.isnan(summaries[m].mean_delta_l) else summaries[m].mean_delta_l for m in methods]
    if normalization == "fixed" or len(methods) < 2:
        phi_n = [min(p / PHI_REF_DEG, 1.0) for p in phis]
        dl_n = [min(d / DELTA_REF_M, 1.0) for d in dls]
    else:
        phi_n = _minmax(phis)
        dl_n = _minmax(dls)
    for m, pn, dn in zip(methods, phi_n, dl_n):
        summaries[m].tradeoff = 0.5 * pn + 0.5 * dn
    return summaries["run"] if single else summaries
