"""Flat-earth strapdown INS simulation and the 15-state error-state EKF.

The body frame is the camera frame, so the body-to-level DCM is the camera
rotation ``R = Phi(phi) Theta(theta) Psi(psi)`` of :mod:`dtmnav.camgeom`.

Error convention: every delta is truth minus navigation, and the attitude
error angles are the Euler angles of ``D_r D_c^T``.  For small angles
``D_r D_c^T ~ I - skew(dalpha)``.

State slots follow the transition matrix as written: ``X[9:12]`` feeds the
attitude error through ``-DCM`` and therefore acts as the gyro bias, while
``X[12:15]`` feeds the velocity error and acts as the accelerometer bias.
Sensor models are

* gyro:  ``w_meas = w - b_g + n_g``, compensated as ``w_meas + X[9:12]``
* accel: ``f_meas = f + b_a + n_a``, compensated as ``f_meas - X[12:15]``

which keeps both ``-DCM`` couplings consistent with those definitions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .camgeom import CameraPose, dcm_to_euler, euler_derivatives, euler_to_dcm, skew

GRAVITY = 9.80665

POS = slice(0, 3)
VEL = slice(3, 6)
ATT = slice(6, 9)
GYRO_BIAS = slice(9, 12)
ACCEL_BIAS = slice(12, 15)

H_MATRIX = np.zeros((6, 15))
H_MATRIX[[0, 1, 2, 3, 4, 5], [0, 1, 2, 6, 7, 8]] = 1.0


class SingularInnovationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class ImuConfig:
    """IMU error model.

    ``accel_noise`` is the per-sample white noise std (m/s^2), so the velocity
    error variance grows by ``accel_noise^2 dt^2`` per sample.  ``gyro_noise``
    is an angle random walk density (rad/sqrt(s)).  Initial biases are drawn
    with these magnitudes in random directions.
    """

    accel_noise: float = 0.0
    gyro_noise: float = 0.0
    accel_bias: float = 0.0
    gyro_bias: float = 0.0
    bias_walk: float = 1e-12
    rate: float = 100.0

    def __post_init__(self):
        for name in ("accel_noise", "gyro_noise", "accel_bias", "gyro_bias", "bias_walk"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.rate <= 0:
            raise ValueError("rate must be positive")

    @property
    def dt(self) -> float:
        return 1.0 / self.rate


@dataclass
class NavState:
    position: np.ndarray
    velocity: np.ndarray
    rotation: np.ndarray  # body (camera) to level frame

    @property
    def attitude(self) -> np.ndarray:
        return dcm_to_euler(self.rotation)

    @property
    def pose(self) -> CameraPose:
        return CameraPose(self.position, self.attitude)

    def copy(self) -> "NavState":
        return NavState(self.position.copy(), self.velocity.copy(), self.rotation.copy())


@dataclass
class NavErrorState:
    X: np.ndarray = field(default_factory=lambda: np.zeros(15))
    P: np.ndarray = field(default_factory=lambda: np.zeros((15, 15)))

    def copy(self) -> "NavErrorState":
        return NavErrorState(self.X.copy(), self.P.copy())


@dataclass
class VisionMeasurement:
    Z: np.ndarray
    R: np.ndarray


def mechanize(state: NavState, omega, specific_force, dt: float) -> NavState:
    """One strapdown step: rotate by ``omega dt``, then integrate ``R f + g``."""
    R = state.rotation
    a = R @ specific_force + np.array([0.0, 0.0, -GRAVITY])
    v = state.velocity + a * dt
    p = state.position + 0.5 * (state.velocity + v) * dt
    R_new = R @ Rotation.from_rotvec(np.asarray(omega) * dt).as_matrix()
    return NavState(p, v, R_new)


@dataclass
class TruthTrack:
    """Truth states at every IMU tick plus the IMU inputs between ticks."""

    dt: float
    states: list  # NavState, length n_ticks + 1
    omega: np.ndarray  # (n_ticks, 3) body rates
    specific_force: np.ndarray  # (n_ticks, 3) body specific force

    @property
    def n_ticks(self) -> int:
        return len(self.omega)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_ticks + 1) * self.dt


def _wrap(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def simulate_trajectory(
    waypoints,
    duration: float,
    dt: float,
    start=None,
    max_turn_rate: float = np.deg2rad(3.0),
    max_accel: float = 2.0,
    max_climb: float = 20.0,
    capture_radius: float = 1000.0,
) -> TruthTrack:
    """Pure-pursuit flight through cyclic waypoints with a nadir-looking camera.

    ``waypoints`` rows are ``(time, x, y, z, speed)``; the time column is
    informational.  The vehicle steers towards the active waypoint with a
    bounded turn rate and tracks its altitude and speed with bounded climb
    rate and acceleration.  The camera looks straight down with its x axis
    along the course.  Truth is produced by :func:`mechanize` from the
    derived IMU inputs, so a perfect IMU reproduces it bit for bit.
    """
    wp = np.atleast_2d(np.asarray(waypoints, dtype=float))
    if wp.shape[1] != 5 or len(wp) < 2:
        raise ValueError("need at least two waypoint rows of (time, x, y, z, speed)")
    if duration <= 0 or dt <= 0:
        raise ValueError("duration and dt must be positive")
    n = int(round(duration / dt))
    if start is None:
        start = wp[0, 1:4]
    pos = np.array(start, dtype=float)
    d0 = wp[1, 1:3] - pos[:2]
    course = float(np.arctan2(d0[1], d0[0]))
    speed = float(wp[1, 4])
    target = 1

    # Kinematic plan: course, speed and climb rate at every tick.
    courses = np.empty(n + 1)
    speeds = np.empty(n + 1)
    climbs = np.empty(n + 1)
    px, py, pz = (float(c) for c in pos)
    for k in range(n + 1):
        goal = wp[target]
        while math.hypot(goal[1] - px, goal[2] - py) < capture_radius:
            target = (target + 1) % len(wp)
            goal = wp[target]
        bearing = math.atan2(goal[2] - py, goal[1] - px)
        climb = min(max(0.2 * (goal[3] - pz), -max_climb), max_climb)
        courses[k], speeds[k], climbs[k] = course, speed, climb
        turn = min(max(0.5 * _wrap(bearing - course), -max_turn_rate), max_turn_rate)
        px += speed * dt * math.cos(course)
        py += speed * dt * math.sin(course)
        pz += climb * dt
        course += turn * dt
        speed += min(max(goal[4] - speed, -max_accel * dt), max_accel * dt)

    vel = np.column_stack([speeds * np.cos(courses), speeds * np.sin(courses), climbs])
    # Nadir camera (phi = pi, theta = 0) with psi equal to the course.
    c, s_ = np.cos(courses), np.sin(courses)
    rots = np.zeros((n + 1, 3, 3))
    rots[:, 0, 0], rots[:, 0, 1] = c, s_
    rots[:, 1, 0], rots[:, 1, 1] = s_, -c
    rots[:, 2, 2] = -1.0
    rel = np.einsum("kji,kjl->kil", rots[:-1], rots[1:])
    omega = Rotation.from_matrix(rel).as_rotvec() / dt
    g = np.array([0.0, 0.0, -GRAVITY])
    force = np.einsum("kji,kj->ki", rots[:-1], np.diff(vel, axis=0) / dt - g)

    states = [NavState(pos.copy(), vel[0].copy(), rots[0].copy())]
    for k in range(n):
        states.append(mechanize(states[-1], omega[k], force[k], dt))
    return TruthTrack(dt, states, omega, force)


@dataclass
class ImuErrors:
    """Sensor biases and the complete per-tick noise stream, drawn up front."""

    accel_bias: np.ndarray
    gyro_bias: np.ndarray
    accel_noise: np.ndarray  # (n_ticks, 3)
    gyro_noise: np.ndarray  # (n_ticks, 3) rate noise

    @classmethod
    def draw(cls, cfg: ImuConfig, n_ticks: int, seed) -> "ImuErrors":
        rng = np.random.default_rng(seed)

        def direction():
            v = rng.normal(size=3)
            return v / np.linalg.norm(v)

        ab = cfg.accel_bias * direction()
        gb = cfg.gyro_bias * direction()
        an = rng.normal(0.0, cfg.accel_noise, size=(n_ticks, 3))
        gn = rng.normal(0.0, cfg.gyro_noise / np.sqrt(cfg.dt), size=(n_ticks, 3))
        return cls(ab, gb, an, gn)

    def measure(self, k: int, omega, force):
        """Corrupted IMU sample ``(w_meas, f_meas)`` at tick ``k``."""
        return omega - self.gyro_bias + self.gyro_noise[k], force + self.accel_bias + self.accel_noise[k]


@dataclass
class InsTruthAndNav:
    """Truth track, sensor errors and the running navigation solution."""

    truth: TruthTrack
    errors: ImuErrors
    config: ImuConfig
    nav: NavState
    gyro_bias_est: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias_est: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tick: int = 0
    last_dv: np.ndarray = field(default_factory=lambda: np.zeros(3))  # compensated body delta-V

    @property
    def true_state(self) -> NavState:
        return self.truth.states[self.tick]

    @property
    def time(self) -> float:
        return self.tick * self.truth.dt

    def copy(self) -> "InsTruthAndNav":
        return InsTruthAndNav(
            self.truth,
            self.errors,
            self.config,
            self.nav.copy(),
            self.gyro_bias_est.copy(),
            self.accel_bias_est.copy(),
            self.tick,
            self.last_dv.copy(),
        )


def propagate_ins(ins: InsTruthAndNav, dt: float | None = None) -> InsTruthAndNav:
    """Advance truth and navigation by ``dt`` (a whole number of IMU ticks).

    The noise samples come from the pre-drawn stream in ``ins.errors``, so
    re-running from a copy replays the same inputs exactly.
    """
    step = ins.truth.dt
    dt = step if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    m = int(round(dt / step))
    if m < 1 or abs(m * step - dt) > 1e-9 * max(dt, 1.0):
        raise ValueError("dt must be a whole number of IMU ticks")
    if ins.tick + m > ins.truth.n_ticks:
        raise ValueError("propagation beyond the end of the truth track")
    out = ins.copy()
    for _ in range(m):
        k = out.tick
        w_meas, f_meas = ins.errors.measure(k, ins.truth.omega[k], ins.truth.specific_force[k])
        w = w_meas + out.gyro_bias_est
        f = f_meas - out.accel_bias_est
        out.nav = mechanize(out.nav, w, f, step)
        out.last_dv = f * step
        out.tick = k + 1
    return out


def build_transition(euler, dV, dt: float) -> np.ndarray:
    """``A_k = I + Phi dt`` for the flat-earth error dynamics."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    dcm = euler_to_dcm(*euler)
    return _transition(dcm, dV, dt)


def _transition(dcm, dV, dt):
    f_vec = dcm @ np.asarray(dV, dtype=float) / dt
    Phi = np.zeros((15, 15))
    Phi[POS, VEL] = np.eye(3)
    Phi[VEL, ATT] = skew(f_vec)
    Phi[ATT, GYRO_BIAS] = -dcm
    Phi[VEL, ACCEL_BIAS] = -dcm
    return np.eye(15) + Phi * dt


def process_noise(cfg: ImuConfig, dt: float) -> np.ndarray:
    if dt <= 0:
        raise ValueError("dt must be positive")
    q = np.zeros(15)
    q[VEL] = cfg.accel_noise**2 * dt**2
    q[ATT] = cfg.gyro_noise**2 * dt
    q[9:15] = cfg.bias_walk * dt
    return np.diag(q)


def time_update(state: NavErrorState, A, Q) -> NavErrorState:
    X = np.zeros(15)
    X[9:] = state.X[9:]
    return NavErrorState(X, A @ state.P @ A.T + Q)


def measurement_update(state: NavErrorState, meas: VisionMeasurement, H=H_MATRIX) -> NavErrorState:
    """Gain, state and Joseph-form covariance update."""
    P = state.P
    S = H @ P @ H.T + meas.R
    try:
        if np.linalg.cond(S) > 1e15:
            raise np.linalg.LinAlgError
        K = np.linalg.solve(S, H @ P).T
    except np.linalg.LinAlgError as exc:
        raise SingularInnovationError("innovation covariance is singular") from exc
    X = state.X + K @ (meas.Z - H @ state.X)
    IKH = np.eye(len(X)) - K @ H
    P_new = IKH @ P @ IKH.T + K @ meas.R @ K.T
    return NavErrorState(X, 0.5 * (P_new + P_new.T))


def error_angle_jacobian(attitude) -> np.ndarray:
    """``d(error angles)/d(Euler angles)`` at ``attitude``.

    Perturbing the Euler angles by ``e`` changes the rotation by
    ``D(a + e) D(a)^T ~ I - skew(T e)``; ``T`` maps Euler-angle covariance into
    the error-angle space the filter works in.
    """
    R = euler_to_dcm(*attitude)
    dR = euler_derivatives(*attitude)
    T = np.empty((3, 3))
    for k in range(3):
        W = dR[k] @ R.T  # = -skew(t_k)
        T[:, k] = [W[2, 1], W[0, 2], W[1, 0]]
    return -T


def form_measurement(vision_pose: CameraPose, Sigma_C2, nav_pose: CameraPose) -> VisionMeasurement:
    """Vision minus INS: position difference and Euler angles of ``D_m D_c^T``.

    ``Sigma_C2`` is the covariance of the vision pose in (position, Euler
    angle) coordinates; its angle rows are mapped into error-angle space.
    """
    Z = np.empty(6)
    Z[:3] = vision_pose.position - nav_pose.position
    Z[3:] = dcm_to_euler(vision_pose.rotation @ nav_pose.rotation.T)
    T = np.eye(6)
    T[3:, 3:] = error_angle_jacobian(vision_pose.attitude)
    R = T @ np.asarray(Sigma_C2, dtype=float) @ T.T
    return VisionMeasurement(Z, 0.5 * (R + R.T))


def apply_correction(ins: InsTruthAndNav, state: NavErrorState):
    """Feed the estimate back into the INS and zero the error part of ``X``.

    Returns ``(ins, state)``; the inputs are not modified.
    """
    X = state.X
    out = ins.copy()
    out.nav = NavState(
        ins.nav.position + X[POS],
        ins.nav.velocity + X[VEL],
        euler_to_dcm(*X[ATT]) @ ins.nav.rotation,
    )
    out.gyro_bias_est = X[GYRO_BIAS].copy()
    out.accel_bias_est = X[ACCEL_BIAS].copy()
    new = state.copy()
    new.X[:9] = 0.0
    return out, new


def filter_step(ins: InsTruthAndNav, state: NavErrorState) -> tuple[InsTruthAndNav, NavErrorState]:
    """One IMU tick of INS propagation followed by the covariance time update."""
    nxt = propagate_ins(ins)
    A = _transition(ins.nav.rotation, nxt.last_dv, ins.truth.dt)
    return nxt, time_update(state, A, process_noise(ins.config, ins.truth.dt))


def navigation_errors(ins: InsTruthAndNav) -> np.ndarray:
    """Truth minus nav: position, velocity and error angles, shape ``(9,)``."""
    t, n = ins.true_state, ins.nav
    return np.concatenate([
        t.position - n.position,
        t.velocity - n.velocity,
        dcm_to_euler(t.rotation @ n.rotation.T),
    ])


def start_ins(truth: TruthTrack, cfg: ImuConfig, seed, initial_error=None) -> InsTruthAndNav:
    """Navigation initialised at truth plus ``initial_error`` (9-vector, truth minus nav)."""
    errors = ImuErrors.draw(cfg, truth.n_ticks, seed)
    s0 = truth.states[0]
    nav = s0.copy()
    if initial_error is not None:
        e = np.asarray(initial_error, dtype=float)
        nav = NavState(s0.position - e[POS], s0.velocity - e[VEL], euler_to_dcm(*e[ATT]).T @ s0.rotation)
    return InsTruthAndNav(truth, errors, cfg, nav)


def snapshot(ins: InsTruthAndNav, state: NavErrorState):
    return ins.copy(), state.copy()


__all__ = [
    "GRAVITY",
    "H_MATRIX",
    "ImuConfig",
    "ImuErrors",
    "InsTruthAndNav",
    "NavErrorState",
    "NavState",
    "SingularInnovationError",
    "TruthTrack",
    "VisionMeasurement",
    "apply_correction",
    "build_transition",
    "error_angle_jacobian",
    "filter_step",
    "form_measurement",
    "mechanize",
    "measurement_update",
    "navigation_errors",
    "process_noise",
    "propagate_ins",
    "simulate_trajectory",
    "start_ins",
    "time_update",
]
