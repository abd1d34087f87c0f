"""Scenario configuration, Monte-Carlo sweeps, closed-loop flights and reports.

Configuration files are INI text (see ``README.md`` for the schema).  Every
random draw is seeded from the master seed, so a config file fully
determines every output byte.
"""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .camgeom import (
    CameraPose,
    EgoMotion,
    ParamVector,
    compose_second_pose,
    dcm_to_euler,
    ego_between,
    generate_observations,
    pixel_sigma,
)
from .estimator import SolverConfig, solve_pose
from .guards import Condition, GateConfig, GateReport, StrikeState, evaluate_fix, update_strike_counter
from .insekf import (
    ImuConfig,
    NavErrorState,
    apply_correction,
    filter_step,
    form_measurement,
    measurement_update,
    propagate_ins,
    simulate_trajectory,
    start_ins,
)
from .terrain import DtmGrid, height_error_std, resample_grid, synth_terrain
from .uncertainty import NoiseModel, pose_covariance

log = logging.getLogger(__name__)

SWEEP_PARAMS = ("features", "resolution", "grid_spacing", "relief", "translation_magnitude")


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every violation found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TerrainConfig:
    seed: int = 1
    extent: float = 3000.0
    relief: float = 300.0
    spacing: float = 30.0  # map (DTM) grid spacing
    truth_spacing: float = 5.0  # spacing of the synthetic "real" terrain
    n_waves: int = 60
    min_wavelength: float = 20.0
    max_wavelength: float = 2000.0


@dataclass(frozen=True)
class CameraConfig:
    resolution: int = 400
    fov_deg: float = 60.0

    @property
    def fov(self) -> float:
        return math.radians(self.fov_deg)


@dataclass(frozen=True)
class NoiseConfig:
    """Explicit overrides; ``None`` derives the value from the scenario.

    With ``sigma_h`` set, the true terrain is replaced by the map itself and each feature
    sees an independent Gaussian map height error of that std.  Without it,
    the map is the true terrain resampled at the map spacing and
    ``sigma_h`` is measured from the difference.
    """

    sigma_l: float | None = None
    sigma_h: float | None = None
    outlier_fraction: float = 0.0  # share of features whose q2 is grossly displaced
    outlier_scale: float = 50.0  # displacement, in units of sigma_l


@dataclass(frozen=True)
class MotionConfig:
    translation: float = 40.0  # |p12|, m
    rotation_deg: float = 10.0  # |(phi12, theta12, psi12)|


@dataclass(frozen=True)
class TrialConfig:
    height: float = 500.0
    tilt_deg: float = 5.0
    perturb_position: float = 50.0
    perturb_angle_deg: float = 1.0
    perturb_ego_translation: float = 0.5
    perturb_ego_angle_deg: float = 0.1


@dataclass(frozen=True)
class FlightConfig:
    height: float = 1000.0
    speed: float = 200.0
    duration: float = 400.0
    delta_time: float = 15.0
    baseline: float = 200.0
    resolution: int = 1000
    features: int = 120
    init_position_std: float = 10.0
    init_velocity_std: float = 0.5
    init_attitude_std: float = 1e-3
    waypoints: tuple = ()  # rows of (time, x, y, z, speed); empty = default racetrack

    def resolved_waypoints(self, relief: float) -> np.ndarray:
        if self.waypoints:
            return np.asarray(self.waypoints, dtype=float)
        z = relief / 2.0 + self.height
        v = self.speed
        return np.array([
            [0.0, 0.0, 0.0, z, v],
            [100.0, 20000.0, 0.0, z, v],
            [140.0, 20000.0, 8000.0, z, v],
            [240.0, 0.0, 8000.0, z, v],
        ])


@dataclass(frozen=True)
class ScenarioConfig:
    terrain: TerrainConfig = field(default_factory=TerrainConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    features: int = 170
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    trial: TrialConfig = field(default_factory=TrialConfig)
    flight: FlightConfig = field(default_factory=FlightConfig)
    imu: ImuConfig = field(
        default_factory=lambda: ImuConfig(accel_noise=0.05, gyro_noise=1e-4, accel_bias=5e-3, gyro_bias=5e-5)
    )
    gates: GateConfig = field(default_factory=GateConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    trials: int = 150
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        problems = validate(self)
        if problems:
            raise ConfigError(problems)

    @property
    def sigma_l(self) -> float:
        if self.noise.sigma_l is not None:
            return self.noise.sigma_l
        return pixel_sigma(self.camera.resolution, self.camera.fov)


def validate(cfg: ScenarioConfig) -> list:
    out = []

    def positive(section, obj, names):
        for n in names:
            v = getattr(obj, n)
            if not v > 0:
                out.append(f"{section}.{n} must be positive (got {v!r})")

    positive("terrain", cfg.terrain, ("extent", "relief", "spacing", "truth_spacing", "min_wavelength"))
    if cfg.terrain.n_waves < 1:
        out.append("terrain.n_waves must be positive")
    if cfg.terrain.max_wavelength < cfg.terrain.min_wavelength:
        out.append("terrain.max_wavelength must not be below terrain.min_wavelength")
    if cfg.terrain.truth_spacing > cfg.terrain.spacing:
        out.append("terrain.truth_spacing must not exceed terrain.spacing")
    positive("camera", cfg.camera, ("fov_deg",))
    if cfg.camera.resolution < 2:
        out.append(f"camera.resolution must be at least 2 (got {cfg.camera.resolution!r})")
    if not 0 < cfg.camera.fov_deg < 180:
        out.append("camera.fov_deg must lie in (0, 180)")
    if cfg.features < 1:
        out.append(f"features.count must be positive (got {cfg.features!r})")
    for n in ("sigma_l", "sigma_h"):
        v = getattr(cfg.noise, n)
        if v is not None and v < 0:
            out.append(f"noise.{n} must be non-negative (got {v!r})")
    if not 0 <= cfg.noise.outlier_fraction < 0.5:
        out.append("noise.outlier_fraction must lie in [0, 0.5)")
    if cfg.noise.outlier_scale < 0:
        out.append("noise.outlier_scale must be non-negative")
    positive("ego", cfg.motion, ("translation", "rotation_deg"))
    positive("trial", cfg.trial, ("height",))
    for n in ("tilt_deg", "perturb_position", "perturb_angle_deg", "perturb_ego_translation", "perturb_ego_angle_deg"):
        if getattr(cfg.trial, n) < 0:
            out.append(f"trial.{n} must be non-negative")
    positive("flight", cfg.flight, ("height", "speed", "duration", "delta_time", "baseline", "features",
                                    "init_position_std", "init_velocity_std", "init_attitude_std"))
    if cfg.flight.resolution < 2:
        out.append("flight.resolution must be at least 2")
    if cfg.flight.baseline / cfg.flight.speed >= cfg.flight.delta_time:
        out.append("flight.baseline / flight.speed must be shorter than flight.delta_time")
    if cfg.trials < 1:
        out.append("run.trials must be positive")
    if cfg.workers < 1:
        out.append("run.workers must be positive")
    return out


_SECTIONS = {
    "terrain": ("terrain", TerrainConfig),
    "camera": ("camera", CameraConfig),
    "noise": ("noise", NoiseConfig),
    "ego": ("motion", MotionConfig),
    "trial": ("trial", TrialConfig),
    "flight": ("flight", FlightConfig),
    "imu": ("imu", ImuConfig),
    "gates": ("gates", GateConfig),
    "solver": ("solver", SolverConfig),
}
_TOP = {"features": {"count": "features"}, "run": {"trials": "trials", "seed": "seed", "workers": "workers"}}


def _parse_value(raw: str, kind, where: str):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{where}: expected a boolean, got {raw!r}")
    if kind in (int, "int"):
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{where}: expected an integer, got {raw!r}") from None
    if kind in ("float | None",):
        if raw == "" or raw.lower() == "auto":
            return None
    try:
        return float(raw)
    except ValueError:
        raise ValueError(f"{where}: expected a number, got {raw!r}") from None


def _parse_waypoints(raw: str, where: str) -> tuple:
    rows = []
    for k, chunk in enumerate(c for c in raw.replace(";", "\n").split("\n") if c.strip()):
        parts = chunk.replace(",", " ").split()
        if len(parts) != 5:
            raise ValueError(f"{where}: waypoint row {k + 1} needs 5 values (time x y z speed), got {len(parts)}")
        try:
            rows.append(tuple(float(p) for p in parts))
        except ValueError:
            raise ValueError(f"{where}: waypoint row {k + 1} is not numeric: {chunk.strip()!r}") from None
    if len(rows) < 2:
        raise ValueError(f"{where}: at least two waypoints are required")
    return tuple(rows)


def load_config(path) -> ScenarioConfig:
    """Read an INI scenario file; missing keys keep the default scenario values."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"{path}: cannot read config: {exc.strerror or exc}") from exc
    return parse_config(text, str(path))


def parse_config(text: str, source: str = "<config>") -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str  # keys are case-sensitive field names
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError([f"{source}: {exc}"]) from None

    problems = []
    top = {}
    parts = {}
    for section in parser.sections():
        items = parser[section]
        if section in _TOP:
            for key, raw in items.items():
                where = f"{source}: [{section}] {key}"
                if key not in _TOP[section]:
                    problems.append(f"{where}: unknown key")
                    continue
                try:
                    top[_TOP[section][key]] = _parse_value(raw, int, where)
                except ValueError as exc:
                    problems.append(str(exc))
            continue
        if section not in _SECTIONS:
            problems.append(f"{source}: unknown section [{section}]")
            continue
        attr, cls = _SECTIONS[section]
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in items.items():
            where = f"{source}: [{section}] {key}"
            if key not in types:
                problems.append(f"{where}: unknown key")
                continue
            try:
                if key == "waypoints":
                    kw[key] = _parse_waypoints(raw, where)
                else:
                    kw[key] = _parse_value(raw, types[key], where)
            except ValueError as exc:
                problems.append(str(exc))
        try:
            parts[attr] = cls(**kw)
        except (ValueError, TypeError) as exc:
            problems.append(f"{source}: [{section}] {exc}")
    try:
        cfg = ScenarioConfig(**parts, **top)
    except ConfigError as exc:
        problems.extend(f"{source}: {p}" for p in exc.problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def with_sweep_value(cfg: ScenarioConfig, param: str, value) -> ScenarioConfig:
    if param == "features":
        return replace(cfg, features=int(value))
    if param == "resolution":
        return replace(cfg, camera=replace(cfg.camera, resolution=int(value)))
    if param == "grid_spacing":
        return replace(cfg, terrain=replace(cfg.terrain, spacing=float(value)))
    if param == "relief":
        return replace(cfg, terrain=replace(cfg.terrain, relief=float(value)))
    if param == "translation_magnitude":
        return replace(cfg, motion=replace(cfg.motion, translation=float(value)))
    raise ConfigError([f"unknown sweep parameter {param!r}; choose one of {', '.join(SWEEP_PARAMS)}"])


# --------------------------------------------------------------------------
# terrain construction


@lru_cache(maxsize=8)
def _truth_terrain(t: TerrainConfig, periodic: bool) -> DtmGrid:
    return synth_terrain(t.seed, t.extent, t.relief, t.truth_spacing, n_waves=t.n_waves,
                         wavelengths=(t.min_wavelength, t.max_wavelength), periodic=periodic)


def build_terrain(cfg: ScenarioConfig, periodic: bool = False):
    """``(truth, map, sigma_h)`` for the scenario."""
    t = cfg.terrain
    truth = _truth_terrain(t, periodic)
    dtm = resample_grid(truth, t.spacing)
    if cfg.noise.sigma_h is not None:
        return dtm, dtm, float(cfg.noise.sigma_h)
    return truth, dtm, height_error_std(truth, dtm, seed=t.seed)


# --------------------------------------------------------------------------
# Monte-Carlo sweeps


@dataclass
class TrialRecord:
    ok: bool
    converged: bool = False
    accepted: bool = False
    iterations: int = 0
    error: np.ndarray | None = None  # C2 position (3), C2 angles (3), p12 (3), ego angles (3)
    predicted_std: np.ndarray | None = None  # same layout, sqrt of the covariance diagonals
    reason: str = ""
    param_error: np.ndarray | None = None  # estimate minus truth for the 12 unknowns
    param_std: np.ndarray | None = None  # sqrt(diag(Sigma_theta))


def _unit(rng, n=3):
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


def _wrap(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


def trial_geometry(cfg: ScenarioConfig, truth: DtmGrid, rng):
    """Random first pose at the configured height above the terrain and a random ego-motion."""
    ext = cfg.terrain.extent
    x, y = rng.uniform(ext / 3.0, 2.0 * ext / 3.0, size=2)
    z = float(truth.height(x, y)) + cfg.trial.height
    tilt = math.radians(cfg.trial.tilt_deg)
    att = np.array([np.pi + rng.uniform(-tilt, tilt), rng.uniform(-tilt, tilt), rng.uniform(-np.pi, np.pi)])
    pose = CameraPose([x, y, z], att)
    ego = EgoMotion(_unit(rng) * cfg.motion.translation, _unit(rng) * math.radians(cfg.motion.rotation_deg))
    return pose, ego


def perturb(truth_params, trial: TrialConfig, rng) -> np.ndarray:
    a = math.radians(trial.perturb_angle_deg)
    ea = math.radians(trial.perturb_ego_angle_deg)
    out = np.array(truth_params, dtype=float)
    out[0:3] += rng.uniform(-trial.perturb_position, trial.perturb_position, 3)
    out[3:6] += rng.uniform(-a, a, 3)
    out[6:9] += rng.uniform(-trial.perturb_ego_translation, trial.perturb_ego_translation, 3)
    out[9:12] += rng.uniform(-ea, ea, 3)
    return out


def prior_covariance(trial: TrialConfig) -> np.ndarray:
    """15x15 stand-in for the filter prior, matching the uniform initial-guess spread."""
    P = np.zeros((15, 15))
    P[0:3, 0:3] = np.eye(3) * trial.perturb_position**2 / 3.0
    P[6:9, 6:9] = np.eye(3) * math.radians(trial.perturb_angle_deg) ** 2 / 3.0
    return P


def run_trial(cfg: ScenarioConfig, seed, truth=None, dtm=None, sigma_h=None) -> TrialRecord:
    """One single-fix trial: synthesise, solve from a perturbed guess, predict, gate."""
    if truth is None:
        truth, dtm, sigma_h = build_terrain(cfg)
    rng = np.random.default_rng(seed)
    sigma_l = cfg.sigma_l
    pose, ego = trial_geometry(cfg, truth, rng)
    obs_seed = int(rng.integers(2**63))
    try:
        obs, _ = generate_observations(pose, ego, truth, cfg.features, cfg.camera.fov, sigma_l, obs_seed)
    except ValueError as exc:
        return TrialRecord(False, reason=f"observations: {exc}")
    if cfg.noise.sigma_h is not None:
        obs.height_offset = rng.normal(0.0, sigma_h, len(obs))
    if cfg.noise.outlier_fraction > 0:
        inject_outliers(obs, cfg.noise.outlier_fraction, cfg.noise.outlier_scale * sigma_l,
                        np.random.default_rng(np.random.SeedSequence([obs_seed, 11])))
    truth_params = ParamVector(pose, ego).as_array()
    init = perturb(truth_params, cfg.trial, rng)
    try:
        sol = solve_pose(init, obs, dtm, cfg.solver)
        weights = sol.weights if cfg.solver.irls_enabled else None
        cov = pose_covariance(sol.params, sol.observations, NoiseModel(sigma_l, sigma_h), weights)
    except (ValueError, np.linalg.LinAlgError) as exc:
        return TrialRecord(False, reason=f"solve: {exc}")

    est = ParamVector.from_array(sol.params)
    c2_est = compose_second_pose(est.pose, est.ego)
    c2_true = compose_second_pose(pose, ego)
    err = np.concatenate([
        c2_est.position - c2_true.position,
        _wrap(c2_est.attitude - c2_true.attitude),
        sol.params[6:9] - truth_params[6:9],
        _wrap(sol.params[9:12] - truth_params[9:12]),
    ])
    pred = np.sqrt(np.concatenate([np.diag(cov.second_frame), np.diag(cov.full)[6:12]]))
    h = float(c2_est.position[2] - dtm.height(c2_est.position[0], c2_est.position[1], strict=False))
    accepted = False
    if np.isfinite(h) and h > 0:
        report = evaluate_fix(
            init, sol.params, obs, dtm, sol.weights, sol.jacobian, cov.full, cov.second_frame,
            prior_covariance(cfg.trial), h, cfg.gates.resolved(sigma_l),
        )
        accepted = report.accepted
    perr = sol.params - truth_params
    perr[3:6] = _wrap(perr[3:6])
    perr[9:12] = _wrap(perr[9:12])
    return TrialRecord(True, sol.converged, accepted, sol.iterations, err, pred,
                       param_error=perr, param_std=np.sqrt(np.diag(cov.full)))


def inject_outliers(obs, fraction: float, displacement: float, rng) -> np.ndarray:
    """Shift ``round(fraction * n)`` random q2 rays by ``displacement`` in a random image direction."""
    n = len(obs)
    idx = rng.choice(n, int(round(fraction * n)), replace=False)
    ang = rng.uniform(0.0, 2.0 * np.pi, len(idx))
    obs.q2[idx, 0] += displacement * np.cos(ang)
    obs.q2[idx, 1] += displacement * np.sin(ang)
    return idx


def trial_seed(master: int, k: int) -> np.random.SeedSequence:
    # Independent of the sweep value: common random numbers across a sweep.
    return np.random.SeedSequence([master, 7, k])


METRIC_COLUMNS = [
    "value",
    "trials",
    "solved",
    "converged",
    "accept_rate",
    "sigma_l",
    "sigma_h",
    "emp_pos_std",
    "emp_att_std",
    "emp_ego_trans_std",
    "emp_ego_rot_std",
    "pred_pos_std",
    "pred_att_std",
    "pred_ego_trans_std",
    "pred_ego_rot_std",
    "mean_pos_err_x",
    "mean_pos_err_y",
    "mean_pos_err_z",
    "emp_pos_std_x",
    "emp_pos_std_y",
    "emp_pos_std_z",
]


@dataclass
class MetricsTable:
    param: str
    rows: list  # dicts keyed by METRIC_COLUMNS
    records: dict = field(default_factory=dict)  # value -> list[TrialRecord]

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def __len__(self):
        return len(self.rows)


def _rms_std(errors, sl):
    if len(errors) < 2:
        return float("nan")
    return float(np.sqrt(np.mean(np.var(errors[:, sl], axis=0, ddof=1))))


def _rms_pred(preds, sl):
    # Median over trials: a rare wrong-minimum solve carries a huge covariance.
    if len(preds) == 0:
        return float("nan")
    return float(np.median(np.sqrt(np.mean(preds[:, sl] ** 2, axis=1))))


def summarise(value, records, sigma_l, sigma_h) -> dict:
    good = [r for r in records if r.ok]
    E = np.array([r.error for r in good]) if good else np.zeros((0, 12))
    S = np.array([r.predicted_std for r in good]) if good else np.zeros((0, 12))
    row = {
        "value": float(value),
        "trials": len(records),
        "solved": len(good),
        "converged": sum(r.converged for r in good),
        "accept_rate": sum(r.accepted for r in records) / len(records),
        "sigma_l": float(sigma_l),
        "sigma_h": float(sigma_h),
        "emp_pos_std": _rms_std(E, slice(0, 3)),
        "emp_att_std": _rms_std(E, slice(3, 6)),
        "emp_ego_trans_std": _rms_std(E, slice(6, 9)),
        "emp_ego_rot_std": _rms_std(E, slice(9, 12)),
        "pred_pos_std": _rms_pred(S, slice(0, 3)),
        "pred_att_std": _rms_pred(S, slice(3, 6)),
        "pred_ego_trans_std": _rms_pred(S, slice(6, 9)),
        "pred_ego_rot_std": _rms_pred(S, slice(9, 12)),
    }
    for k, ax in enumerate("xyz"):
        row[f"mean_pos_err_{ax}"] = float(E[:, k].mean()) if len(E) else float("nan")
        row[f"emp_pos_std_{ax}"] = float(E[:, k].std(ddof=1)) if len(E) > 1 else float("nan")
    return row


def _trial_job(args):
    cfg, k = args
    truth, dtm, sigma_h = build_terrain(cfg)
    return run_trial(cfg, trial_seed(cfg.seed, k), truth, dtm, sigma_h)


def run_monte_carlo(cfg: ScenarioConfig, param: str, values) -> MetricsTable:
    """Sweep ``param`` over ``values`` with ``cfg.trials`` single-fix trials each."""
    if param not in SWEEP_PARAMS:
        raise ConfigError([f"unknown sweep parameter {param!r}; choose one of {', '.join(SWEEP_PARAMS)}"])
    values = list(values)
    if not values:
        raise ConfigError(["sweep needs at least one value"])
    rows, records = [], {}
    for v in values:
        cv = with_sweep_value(cfg, param, v)
        truth, dtm, sigma_h = build_terrain(cv)
        jobs = [(cv, k) for k in range(cv.trials)]
        if cv.workers > 1:
            with ProcessPoolExecutor(cv.workers) as pool:
                recs = list(pool.map(_trial_job, jobs))
        else:
            recs = [run_trial(cv, trial_seed(cv.seed, k), truth, dtm, sigma_h) for _, k in jobs]
        failed = sum(not r.ok for r in recs)
        if failed:
            log.info("%s=%s: %d of %d trials failed", param, v, failed, len(recs))
        rows.append(summarise(v, recs, cv.sigma_l, sigma_h))
        records[v] = recs
    return MetricsTable(param, rows, records)


# --------------------------------------------------------------------------
# closed-loop flight


@dataclass
class FixRecord:
    time: float
    tick: int
    report: GateReport
    sigma_c2_diag: np.ndarray  # NaN when the solver failed
    vision_position: np.ndarray
    rolled_back: bool = False


@dataclass
class TrajectoryLog:
    times: np.ndarray
    truth: np.ndarray  # (n, 9): position, velocity, attitude
    raw: np.ndarray  # uncorrected INS, same layout
    nav: np.ndarray  # corrected INS, same layout
    fixes: list
    sigma_l: float
    sigma_h: float
    final: tuple = None  # (ins, filter state) at the end of the run
    checkpoint: tuple = None  # (ins, filter state) restored by a rollback, if any

    def position_error(self, which: str = "nav") -> np.ndarray:
        return self.truth[:, 0:3] - getattr(self, which)[:, 0:3]

    def velocity_error(self, which: str = "nav") -> np.ndarray:
        return self.truth[:, 3:6] - getattr(self, which)[:, 3:6]

    @property
    def disabled(self) -> bool:
        return any(f.report.disabled for f in self.fixes)


def _row(state) -> np.ndarray:
    return np.concatenate([state.position, state.velocity, dcm_to_euler(state.rotation)])


def run_flight(cfg: ScenarioConfig, forced_failures=()) -> TrajectoryLog:
    """Closed-loop INS/vision flight plus the paired uncorrected INS run.

    ``forced_failures`` lists fix indices (0-based) whose gates are forced
    to fail, for exercising the strike rule.
    """
    fl = cfg.flight
    truth_grid, dtm, sigma_h = build_terrain(cfg, periodic=True)
    sigma_l = cfg.noise.sigma_l if cfg.noise.sigma_l is not None else pixel_sigma(fl.resolution, cfg.camera.fov)
    gates = cfg.gates.resolved(sigma_l)
    dt = cfg.imu.dt
    track = simulate_trajectory(fl.resolved_waypoints(cfg.terrain.relief), fl.duration, dt)
    n = track.n_ticks

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    init_err = np.concatenate([
        rng.normal(0.0, fl.init_position_std, 3),
        rng.normal(0.0, fl.init_velocity_std, 3),
        rng.normal(0.0, fl.init_attitude_std, 3),
    ])
    imu_seed = np.random.SeedSequence([cfg.seed, 2])
    ins = start_ins(track, cfg.imu, imu_seed, init_err)
    base = start_ins(track, cfg.imu, imu_seed, init_err)
    P0 = np.diag(np.concatenate([
        np.full(3, fl.init_position_std**2),
        np.full(3, fl.init_velocity_std**2),
        np.full(3, fl.init_attitude_std**2),
        np.full(3, max(cfg.imu.gyro_bias, 1e-9) ** 2),
        np.full(3, max(cfg.imu.accel_bias, 1e-9) ** 2),
    ]))
    state = NavErrorState(np.zeros(15), P0)

    truth_log = np.array([_row(s) for s in track.states])
    raw_log = np.empty((n + 1, 9))
    nav_log = np.empty((n + 1, 9))
    nav_rot = np.empty((n + 1, 3, 3))
    raw_log[0] = nav_log[0] = _row(ins.nav)
    nav_rot[0] = ins.nav.rotation

    fix_every = int(round(fl.delta_time / dt))
    gap = int(round(fl.baseline / fl.speed / dt))
    strikes = StrikeState()
    checkpoint = None
    restored = None
    fixes = []
    forced = set(int(i) for i in forced_failures)

    for k in range(1, n + 1):
        ins, state = filter_step(ins, state)
        base = propagate_ins(base)
        raw_log[k] = _row(base.nav)
        nav_log[k] = _row(ins.nav)
        nav_rot[k] = ins.nav.rotation
        if k % fix_every or k - gap < 0:
            continue
        idx = len(fixes)
        t = k * dt
        if strikes.disabled:
            rep = update_strike_counter(GateReport(time=t), strikes)
            fixes.append(FixRecord(t, k, rep, np.full(6, np.nan), np.full(3, np.nan)))
            continue

        fix_seed = np.random.SeedSequence([cfg.seed, 3, idx])
        rep, c2, S_c2 = _vision_fix(cfg, track, truth_grid, dtm, sigma_l, sigma_h, gates,
                                    nav_log, nav_rot, ins, state, k, gap, fix_seed)
        rep.time = t
        if idx in forced:
            rep.extend([Condition("forced", 1.0, 0.0, False)])
        update_strike_counter(rep, strikes)
        diag = np.diag(S_c2) if S_c2 is not None else np.full(6, np.nan)
        rec = FixRecord(t, k, rep, diag, c2.position if c2 is not None else np.full(3, np.nan))
        fixes.append(rec)
        if rep.accepted:
            checkpoint = (ins.copy(), state.copy(), k, idx)
            meas = form_measurement(c2, S_c2, ins.nav.pose)
            state = measurement_update(state, meas)
            ins, state = apply_correction(ins, state)
            nav_log[k] = _row(ins.nav)
            nav_rot[k] = ins.nav.rotation
        elif strikes.rollback and checkpoint is not None:
            ck_ins, ck_state, ck_tick, ck_idx = checkpoint
            fixes[ck_idx].rolled_back = True
            restored = (ck_ins.copy(), ck_state.copy(), ck_tick)
            ins, state = ck_ins.copy(), ck_state.copy()
            nav_log[ck_tick] = _row(ins.nav)
            nav_rot[ck_tick] = ins.nav.rotation
            for j in range(ck_tick + 1, k + 1):
                ins, state = filter_step(ins, state)
                nav_log[j] = _row(ins.nav)
                nav_rot[j] = ins.nav.rotation

    return TrajectoryLog(
        track.times, truth_log, raw_log, nav_log, fixes, sigma_l, sigma_h,
        final=(ins, state), checkpoint=restored,
    )


def _vision_fix(cfg, track, truth_grid, dtm, sigma_l, sigma_h, gates, nav_log, nav_rot, ins, state, k, gap, seed):
    fl = cfg.flight
    k1 = k - gap
    pose1 = track.states[k1].pose
    pose2 = track.states[k].pose
    ego = ego_between(pose1, pose2)
    nav1 = CameraPose(nav_log[k1, 0:3], dcm_to_euler(nav_rot[k1]))
    nav2 = ins.nav.pose
    init = ParamVector(nav1, ego_between(nav1, nav2)).as_array()
    try:
        obs, _ = generate_observations(pose1, ego, truth_grid, fl.features, cfg.camera.fov, sigma_l, seed)
        sol = solve_pose(init, obs, dtm, cfg.solver)
        weights = sol.weights if cfg.solver.irls_enabled else None
        cov = pose_covariance(sol.params, sol.observations, NoiseModel(sigma_l, sigma_h), weights)
        est = ParamVector.from_array(sol.params)
        c2 = compose_second_pose(est.pose, est.ego)
    except (ValueError, np.linalg.LinAlgError) as exc:
        log.info("vision fix at tick %d failed: %s", k, exc)
        return GateReport([Condition("solver", 0.0, 1.0, False)]), None, None
    h = float(nav2.position[2] - dtm.height(nav2.position[0], nav2.position[1], strict=False))
    if not h > 0:
        return GateReport([Condition("height", h, 0.0, False)]), None, None
    rep = evaluate_fix(init, sol.params, obs, dtm, sol.weights, sol.jacobian, cov.full, cov.second_frame,
                       state.P, h, gates)
    return rep, c2, cov.second_frame


# --------------------------------------------------------------------------
# reports


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow(r)
    except OSError as exc:
        raise OSError(f"{path}: cannot write report: {exc.strerror or exc}") from exc


def _write_json(path: Path, obj) -> None:
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"{path}: cannot write manifest: {exc.strerror or exc}") from exc


TRAJ_COLUMNS = ["time"] + [
    f"{src}_{q}"
    for src in ("truth", "raw", "nav")
    for q in ("x", "y", "z", "vx", "vy", "vz", "phi", "theta", "psi")
]


def emit_report(result, out_dir) -> list:
    """Write CSV files plus ``manifest.json``; returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{out}: cannot create output directory: {exc.strerror or exc}") from exc
    if isinstance(result, MetricsTable):
        return _emit_metrics(result, out)
    if isinstance(result, TrajectoryLog):
        return _emit_trajectory(result, out)
    raise TypeError(f"cannot report on {type(result).__name__}")


def _emit_metrics(table: MetricsTable, out: Path) -> list:
    path = out / "metrics.csv"
    _write_csv(path, METRIC_COLUMNS, ([_fmt(r[c]) for c in METRIC_COLUMNS] for r in table.rows))
    series = {
        name: {"file": path.name, "x": "value", "y": name}
        for name in METRIC_COLUMNS[5:]
    }
    manifest = {"kind": "sweep", "param": table.param, "files": [path.name], "series": series}
    mpath = out / "manifest.json"
    _write_json(mpath, manifest)
    return [path, mpath]


def _emit_trajectory(tl: TrajectoryLog, out: Path) -> list:
    tpath = out / "trajectory.csv"
    data = np.column_stack([tl.times, tl.truth, tl.raw, tl.nav])
    _write_csv(tpath, TRAJ_COLUMNS, ([_fmt(v) for v in row] for row in data))

    cond_names = []
    for f in tl.fixes:
        for c in f.report.conditions:
            if c.name not in cond_names:
                cond_names.append(c.name)
    header = ["time", "tick"]
    for c in cond_names:
        header += [f"{c}_lhs", f"{c}_rhs", f"{c}_pass"]
    header += ["accepted", "strikes", "disabled", "rolled_back"]
    header += [f"sigma_c2_{q}" for q in ("x", "y", "z", "phi", "theta", "psi")]
    header += ["vision_x", "vision_y", "vision_z"]
    rows = []
    for f in tl.fixes:
        by = {c.name: c for c in f.report.conditions}
        row = [_fmt(f.time), _fmt(f.tick)]
        for c in cond_names:
            if c in by:
                row += [_fmt(by[c].lhs), _fmt(by[c].rhs), _fmt(by[c].passed)]
            else:
                row += ["", "", ""]
        row += [_fmt(f.report.accepted), _fmt(f.report.strike_count), _fmt(f.report.disabled), _fmt(f.rolled_back)]
        row += [_fmt(v) for v in f.sigma_c2_diag]
        row += [_fmt(v) for v in f.vision_position]
        rows.append(row)
    fpath = out / "fixes.csv"
    _write_csv(fpath, header, rows)

    series = {}
    for src in ("truth", "raw", "nav"):
        for q in ("x", "y", "z", "vx", "vy", "vz", "phi", "theta", "psi"):
            series[f"{src}_{q}"] = {"file": tpath.name, "x": "time", "y": f"{src}_{q}"}
    for q in ("x", "y", "z", "phi", "theta", "psi"):
        series[f"sigma_c2_{q}"] = {"file": fpath.name, "x": "time", "y": f"sigma_c2_{q}"}
    manifest = {
        "kind": "flight",
        "files": [tpath.name, fpath.name],
        "sigma_l": tl.sigma_l,
        "sigma_h": tl.sigma_h,
        "series": series,
    }
    mpath = out / "manifest.json"
    _write_json(mpath, manifest)
    return [tpath, fpath, mpath]


__all__ = [
    "CameraConfig",
    "ConfigError",
    "FixRecord",
    "FlightConfig",
    "MetricsTable",
    "MotionConfig",
    "NoiseConfig",
    "SWEEP_PARAMS",
    "ScenarioConfig",
    "TerrainConfig",
    "TrajectoryLog",
    "TrialConfig",
    "TrialRecord",
    "build_terrain",
    "emit_report",
    "inject_outliers",
    "load_config",
    "parse_config",
    "run_flight",
    "run_monte_carlo",
    "run_trial",
    "with_sweep_value",
]
