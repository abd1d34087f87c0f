"""Acceptance gates for a vision fix and the three-strikes shutdown rule."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .camgeom import ATT12, P12, ObservationSet, ParamVector, compose_second_pose
from .estimator import trace_ground
from .terrain import DtmGrid, RayMissError
from .uncertainty import normal_rcond

STRIKE_LIMIT = 3


@dataclass(frozen=True)
class GateConfig:
    threshold_pct: float = 0.1
    threshold_rcond: float = 1e-16
    threshold_dist: float = 40.0
    threshold_angle: float = 40.0
    threshold_dist12: float = 0.1
    threshold_angle12: float = 0.1
    sigma_f: float = 0.0  # 0 means "use sigma_l"
    L_ground_dist: float = 200.0
    focal_length: float = 1.0

    def __post_init__(self):
        for name in ("threshold_pct", "threshold_rcond", "threshold_dist", "threshold_angle",
                     "threshold_dist12", "threshold_angle12", "L_ground_dist", "focal_length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma_f < 0:
            raise ValueError("sigma_f must be non-negative")

    def resolved(self, sigma_l: float) -> "GateConfig":
        return self if self.sigma_f > 0 else replace(self, sigma_f=sigma_l)


@dataclass(frozen=True)
class Condition:
    name: str
    lhs: float
    rhs: float
    passed: bool


def _lt(name, lhs, rhs) -> Condition:
    return Condition(name, float(lhs), float(rhs), bool(lhs < rhs))


def _ge(name, lhs, rhs) -> Condition:
    return Condition(name, float(lhs), float(rhs), bool(lhs >= rhs))


def _gt(name, lhs, rhs) -> Condition:
    return Condition(name, float(lhs), float(rhs), bool(lhs > rhs))


@dataclass
class GateReport:
    conditions: list = field(default_factory=list)
    strike_count: int = 0
    disabled: bool = False
    time: float = float("nan")

    @property
    def accepted(self) -> bool:
        return not self.disabled and all(c.passed for c in self.conditions)

    @property
    def failed(self) -> list:
        return [c.name for c in self.conditions if not c.passed]

    def extend(self, conditions) -> "GateReport":
        self.conditions.extend(conditions)
        return self

    def __getitem__(self, name) -> Condition:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)


def predict_q2(params, observations: ObservationSet, grid: DtmGrid) -> np.ndarray:
    """Reproject the ray-traced ground points into the second camera, ``(n, 3)``."""
    theta = params.as_array() if isinstance(params, ParamVector) else np.asarray(params, dtype=float)
    traced = trace_ground(theta, observations, grid)
    pv = ParamVector.from_array(theta)
    pose2 = compose_second_pose(pv.pose, pv.ego)
    c2 = (traced.ground - pose2.position) @ pose2.rotation
    with np.errstate(divide="ignore", invalid="ignore"):
        q = c2 / c2[:, 2:3]
    q[c2[:, 2] <= 0] = np.nan
    return q


def count_outliers(params, observations: ObservationSet, sigma_f: float, grid: DtmGrid) -> int:
    """Features whose predicted q2 lies more than ``3 sigma_f`` from the observed one.

    A feature whose ray misses the map or lands behind the second camera
    counts as an outlier.
    """
    try:
        q = predict_q2(params, observations, grid)
    except RayMissError:
        q = np.full((len(observations), 3), np.nan)
        for i in range(len(observations)):
            try:
                q[i] = predict_q2(params, observations.subset([i]), grid)[0]
            except (RayMissError, ValueError):
                pass
    d = np.hypot(q[:, 0] - observations.q2[:, 0], q[:, 1] - observations.q2[:, 1])
    return int(np.sum(~(d <= 3.0 * sigma_f)))


def check_outlier_gate(N_i: int, N_f: int, N: int, cfg: GateConfig) -> list:
    if N <= 0:
        raise ValueError("feature count must be positive")
    return [
        _ge("outliers_not_increased", N_i, N_f),
        _lt("outlier_fraction", N_f / N, cfg.threshold_pct),
    ]


def check_conditioning(J_theta, W, cfg: GateConfig) -> list:
    """``W`` is the per-feature weight vector (or ``None`` for unit weights)."""
    return [_gt("rcond", normal_rcond(J_theta, W), cfg.threshold_rcond)]


def _std(S, idx):
    return np.sqrt(np.maximum(np.diag(np.asarray(S))[idx], 0.0))


def check_degeneracy(Sigma_C2, Sigma_theta, ego, h: float, cfg: GateConfig) -> list:
    """Pose-precision, relief and baseline conditions on the propagated covariances."""
    if h <= 0:
        raise ValueError("height must be positive")
    sig = cfg.sigma_f
    pix = 3.0 * sig / cfg.focal_length
    pos_std = _std(Sigma_C2, slice(0, 3))
    ang_std = _std(Sigma_C2, slice(3, 6))
    out = []
    for i, s in zip("xyz", pos_std):
        out.append(_lt(f"pos_precision_{i}", s / (pix * h) if pix > 0 else np.inf, cfg.threshold_dist))
    for i, s in zip("xyz", pos_std):
        out.append(_lt(f"pos_relief_{i}", 3.0 * s, cfg.L_ground_dist))
    for i, s in zip(("phi", "theta", "psi"), ang_std):
        out.append(_lt(f"ang_precision_{i}", s / pix if pix > 0 else np.inf, cfg.threshold_angle))
    for i, s in zip(("phi", "theta", "psi"), ang_std):
        out.append(_lt(f"ang_relief_{i}", 3.0 * s, cfg.L_ground_dist / h))
    base = float(np.linalg.norm(ego.translation))
    t_std = _std(Sigma_theta, P12)
    r_std = _std(Sigma_theta, ATT12)
    for i, s in zip("xyz", t_std):
        out.append(_lt(f"ego_dist_{i}", s / base if base > 0 else np.inf, cfg.threshold_dist12))
    for i, s in zip(("phi", "theta", "psi"), r_std):
        out.append(_lt(f"ego_angle_{i}", s / (base / h) if base > 0 else np.inf, cfg.threshold_angle12))
    return out


def wrap_angle_delta(a, b) -> np.ndarray:
    """``|a - b|`` reduced mod 2 pi into ``[0, pi]``."""
    d = np.mod(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)), 2.0 * np.pi)
    return np.minimum(d, 2.0 * np.pi - d)


@dataclass(frozen=True)
class StateDeltas:
    dp2: np.ndarray
    dalpha2: np.ndarray
    dp12: np.ndarray
    dalpha12: np.ndarray

    @classmethod
    def between(cls, initial, final) -> "StateDeltas":
        """Deltas between two 12-parameter estimates, taken on the second pose and the ego-motion."""
        a = initial.as_array() if isinstance(initial, ParamVector) else np.asarray(initial, dtype=float)
        b = final.as_array() if isinstance(final, ParamVector) else np.asarray(final, dtype=float)
        pa, pb = ParamVector.from_array(a), ParamVector.from_array(b)
        c2a = compose_second_pose(pa.pose, pa.ego)
        c2b = compose_second_pose(pb.pose, pb.ego)
        return cls(
            np.abs(c2b.position - c2a.position),
            wrap_angle_delta(c2b.attitude, c2a.attitude),
            np.abs(b[P12] - a[P12]),
            wrap_angle_delta(b[ATT12], a[ATT12]),
        )


def check_initial_state(P_minus, Sigma_C2, deltas: StateDeltas, ego, h: float, cfg: GateConfig) -> list:
    """Prior-spread and initial-versus-final jump conditions."""
    if h <= 0:
        raise ValueError("height must be positive")
    P_pos = _std(P_minus, slice(0, 3))
    P_ang = _std(P_minus, slice(6, 9))
    S_pos = _std(Sigma_C2, slice(0, 3))
    S_ang = _std(Sigma_C2, slice(3, 6))
    out = []
    for i, s in zip("xyz", P_pos):
        out.append(_lt(f"prior_pos_{i}", 3.0 * s, cfg.L_ground_dist))
    for i, s in zip(("phi", "theta", "psi"), P_ang):
        out.append(_lt(f"prior_ang_{i}", 3.0 * s, cfg.L_ground_dist / h))
    # The jump must be covered by the combined 3-sigma uncertainty.
    for k, i in enumerate("xyz"):
        out.append(_gt(f"jump_pos_{i}", 3.0 * (P_pos[k] + S_pos[k]), deltas.dp2[k]))
    for k, i in enumerate(("phi", "theta", "psi")):
        out.append(_gt(f"jump_ang_{i}", 3.0 * (P_ang[k] + S_ang[k]), deltas.dalpha2[k]))
    base = float(np.linalg.norm(ego.translation))
    for k, i in enumerate("xyz"):
        out.append(_lt(f"jump_ego_dist_{i}", deltas.dp12[k] / base if base > 0 else np.inf, cfg.threshold_dist12))
    for k, i in enumerate(("phi", "theta", "psi")):
        val = deltas.dalpha12[k] / (base / h) if base > 0 else np.inf
        out.append(_lt(f"jump_ego_angle_{i}", val, cfg.threshold_angle12))
    return out


@dataclass
class StrikeState:
    strikes: int = 0
    disabled: bool = False
    rollback: bool = False  # set once, on the fix that disables vision


def update_strike_counter(report: GateReport, history: StrikeState) -> GateReport:
    """Apply the consecutive-failure rule, mutating ``history``.

    Once disabled the state never reverts.  ``history.rollback`` turns true
    exactly on the fix that triggers the shutdown; the caller must then
    retract the last accepted fix.
    """
    history.rollback = False
    if history.disabled:
        report.strike_count = history.strikes
        report.disabled = True
        return report
    passed = all(c.passed for c in report.conditions)
    history.strikes = 0 if passed else history.strikes + 1
    if history.strikes >= STRIKE_LIMIT:
        history.disabled = True
        history.rollback = True
    report.strike_count = history.strikes
    report.disabled = history.disabled
    return report


def report_columns(report: GateReport) -> list:
    cols = ["time"]
    for c in report.conditions:
        cols += [f"{c.name}_lhs", f"{c.name}_rhs", f"{c.name}_pass"]
    return cols + ["accepted", "strikes", "disabled"]


def report_row(report: GateReport) -> list:
    row = [repr(float(report.time))]
    for c in report.conditions:
        row += [repr(c.lhs), repr(c.rhs), int(c.passed)]
    return row + [int(report.accepted), report.strike_count, int(report.disabled)]


def report_csv_line(report: GateReport) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(report_row(report))
    return buf.getvalue()


def evaluate_fix(
    initial,
    solution_params,
    observations: ObservationSet,
    grid: DtmGrid,
    weights,
    J_theta,
    Sigma_theta,
    Sigma_C2,
    P_minus,
    h: float,
    cfg: GateConfig,
) -> GateReport:
    """Run every gate in order (outliers, conditioning, degeneracy, initial state)."""
    n = len(observations)
    N_i = count_outliers(initial, observations, cfg.sigma_f, grid)
    N_f = count_outliers(solution_params, observations, cfg.sigma_f, grid)
    ego = ParamVector.from_array(solution_params).ego
    rep = GateReport()
    rep.extend(check_outlier_gate(N_i, N_f, n, cfg))
    rep.extend(check_conditioning(J_theta, weights, cfg))
    rep.extend(check_degeneracy(Sigma_C2, Sigma_theta, ego, h, cfg))
    rep.extend(check_initial_state(P_minus, Sigma_C2, StateDeltas.between(initial, solution_params), ego, h, cfg))
    return rep


__all__ = [
    "Condition",
    "GateConfig",
    "GateReport",
    "StateDeltas",
    "StrikeState",
    "STRIKE_LIMIT",
    "check_conditioning",
    "check_degeneracy",
    "check_initial_state",
    "check_outlier_gate",
    "count_outliers",
    "evaluate_fix",
    "predict_q2",
    "report_columns",
    "report_csv_line",
    "report_row",
    "update_strike_counter",
    "wrap_angle_delta",
]
