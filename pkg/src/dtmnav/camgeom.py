"""Camera frames, rotations, projection operators and synthetic observations.

Conventions
-----------
* A pose ``(p, R)`` maps camera coordinates to world: ``w = R c + p``.
* Ego-motion ``(p12, R12)`` maps first-camera to second-camera coordinates:
  ``c2 = R12 c1 + p12``.
* Every rotation, camera attitude included, is built from Euler angles as
  ``R = Phi(phi) @ Theta(theta) @ Psi(psi)`` with the elementary matrices
  written out in :func:`euler_to_dcm`.
* Image rays are homogeneous with unit focal length: ``q = (u, v, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .terrain import DtmGrid, RayMissError, intersect_rays

__all__ = [
    "GimbalLockError",
    "CameraPose",
    "EgoMotion",
    "FeatureObservation",
    "ObservationSet",
    "ParamVector",
    "euler_to_dcm",
    "euler_derivatives",
    "dcm_to_euler",
    "euler_jacobian",
    "skew",
    "project",
    "oblique_lift",
    "pinhole_project",
    "compose_second_pose",
    "ego_between",
    "second_frame_points",
    "epipolar_residual",
    "pixel_sigma",
    "generate_observations",
    "P1",
    "ATT1",
    "P12",
    "ATT12",
]

GIMBAL_TOL = 1e-9

# Slices into the 12-parameter vector.
P1 = slice(0, 3)
ATT1 = slice(3, 6)
P12 = slice(6, 9)
ATT12 = slice(9, 12)


class GimbalLockError(ValueError):
    """Euler extraction is singular (|R[0, 2]| too close to 1)."""


def _elementary(phi, theta, psi):
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    Psi = np.array([[cp, sp, 0.0], [-sp, cp, 0.0], [0.0, 0.0, 1.0]])
    Theta = np.array([[ct, 0.0, -st], [0.0, 1.0, 0.0], [st, 0.0, ct]])
    Phi = np.array([[1.0, 0.0, 0.0], [0.0, cf, sf], [0.0, -sf, cf]])
    dPsi = np.array([[-sp, cp, 0.0], [-cp, -sp, 0.0], [0.0, 0.0, 0.0]])
    dTheta = np.array([[-st, 0.0, -ct], [0.0, 0.0, 0.0], [ct, 0.0, -st]])
    dPhi = np.array([[0.0, 0.0, 0.0], [0.0, -sf, cf], [0.0, -cf, -sf]])
    return Phi, Theta, Psi, dPhi, dTheta, dPsi


def euler_to_dcm(phi: float, theta: float, psi: float) -> np.ndarray:
    Phi, Theta, Psi, *_ = _elementary(phi, theta, psi)
    return Phi @ Theta @ Psi


def euler_derivatives(phi: float, theta: float, psi: float) -> np.ndarray:
    """Partial derivatives of :func:`euler_to_dcm`, shape ``(3, 3, 3)`` indexed by angle."""
    Phi, Theta, Psi, dPhi, dTheta, dPsi = _elementary(phi, theta, psi)
    return np.stack([dPhi @ Theta @ Psi, Phi @ dTheta @ Psi, Phi @ Theta @ dPsi])


def dcm_to_euler(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if abs(R[0, 2]) >= 1.0 - GIMBAL_TOL:
        raise GimbalLockError(f"gimbal lock: R[0, 2] = {R[0, 2]!r}")
    phi = np.arctan2(R[1, 2], R[2, 2])
    theta = np.arcsin(-R[0, 2])
    psi = np.arctan2(R[0, 1], R[0, 0])
    return np.array([phi, theta, psi])


def euler_jacobian(R, dR) -> np.ndarray:
    """Derivative of :func:`dcm_to_euler` along matrix directions.

    ``dR`` has shape ``(k, 3, 3)``; the result is ``(3, k)``.
    """
    R = np.asarray(R, dtype=float)
    if abs(R[0, 2]) >= 1.0 - GIMBAL_TOL:
        raise GimbalLockError(f"gimbal lock: R[0, 2] = {R[0, 2]!r}")
    dR = np.asarray(dR, dtype=float)
    a, b = R[1, 2], R[2, 2]
    dphi = (b * dR[:, 1, 2] - a * dR[:, 2, 2]) / (a * a + b * b)
    dtheta = -dR[:, 0, 2] / np.sqrt(1.0 - R[0, 2] ** 2)
    c, d = R[0, 1], R[0, 0]
    dpsi = (d * dR[:, 0, 1] - c * dR[:, 0, 0]) / (c * c + d * d)
    return np.vstack([dphi, dtheta, dpsi])


def skew(x) -> np.ndarray:
    x1, x2, x3 = np.asarray(x, dtype=float)
    return np.array([[0.0, -x3, x2], [x3, 0.0, -x1], [-x2, x1, 0.0]])


def project(u, s) -> np.ndarray:
    """``I - u s^T / (s^T u)``: projects onto the plane normal to ``s`` along ``u``."""
    u = np.asarray(u, dtype=float)
    s = np.asarray(s, dtype=float)
    den = s @ u
    if den == 0.0:
        raise ValueError("projection undefined: s^T u == 0")
    return np.eye(3) - np.outer(u, s) / den


def oblique_lift(q1, R1, N) -> np.ndarray:
    """``q1 N^T / (N^T R1 q1)``, the operator taking ``G_E - p1`` to first-camera coordinates."""
    q1 = np.asarray(q1, dtype=float)
    N = np.asarray(N, dtype=float)
    den = N @ (np.asarray(R1) @ q1)
    if abs(den) < 1e-12 * np.linalg.norm(N) * np.linalg.norm(q1):
        raise ValueError("ray is parallel to the tangent plane")
    return np.outer(q1, N) / den


@dataclass(frozen=True)
class CameraPose:
    position: np.ndarray
    attitude: np.ndarray  # (phi, theta, psi), rad

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "attitude", np.asarray(self.attitude, dtype=float).reshape(3))

    @property
    def rotation(self) -> np.ndarray:
        return euler_to_dcm(*self.attitude)


@dataclass(frozen=True)
class EgoMotion:
    translation: np.ndarray  # p12, second-camera frame
    rotation_angles: np.ndarray  # (phi12, theta12, psi12)

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "rotation_angles", np.asarray(self.rotation_angles, dtype=float).reshape(3))

    @property
    def rotation(self) -> np.ndarray:
        return euler_to_dcm(*self.rotation_angles)


@dataclass(frozen=True)
class ParamVector:
    """The 12 unknowns in fixed order: p1, (phi1, theta1, psi1), p12, (phi12, theta12, psi12)."""

    pose: CameraPose
    ego: EgoMotion

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.pose.position, self.pose.attitude, self.ego.translation, self.ego.rotation_angles])

    @classmethod
    def from_array(cls, theta) -> "ParamVector":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (12,):
            raise ValueError(f"parameter vector must have 12 entries, got shape {theta.shape}")
        return cls(CameraPose(theta[P1], theta[ATT1]), EgoMotion(theta[P12], theta[ATT12]))


@dataclass(frozen=True)
class FeatureObservation:
    q1: np.ndarray
    q2: np.ndarray
    ground: np.ndarray | None = None  # G_E, filled in by the estimator
    normal: np.ndarray | None = None  # N, filled in by the estimator


@dataclass
class ObservationSet:
    """Array-backed batch of correspondences.

    ``q1``/``q2`` are ``(n, 3)`` image rays.  ``ground``/``normal`` hold the
    ray-traced G_E and N once an estimate has been made.  ``height_offset``
    is the per-feature map height error seen by the estimator (zero for a
    perfect map).
    """

    q1: np.ndarray
    q2: np.ndarray
    ground: np.ndarray | None = None
    normal: np.ndarray | None = None
    height_offset: np.ndarray = field(default=None)

    def __post_init__(self):
        self.q1 = np.asarray(self.q1, dtype=float).reshape(-1, 3)
        self.q2 = np.asarray(self.q2, dtype=float).reshape(-1, 3)
        if self.q1.shape != self.q2.shape:
            raise ValueError("q1 and q2 must have matching shapes")
        if self.height_offset is None:
            self.height_offset = np.zeros(len(self.q1))
        else:
            self.height_offset = np.broadcast_to(np.asarray(self.height_offset, float), (len(self.q1),)).copy()

    def __len__(self) -> int:
        return len(self.q1)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i) -> FeatureObservation:
        g = None if self.ground is None else self.ground[i]
        nrm = None if self.normal is None else self.normal[i]
        return FeatureObservation(self.q1[i], self.q2[i], g, nrm)

    @classmethod
    def from_list(cls, observations) -> "ObservationSet":
        obs = list(observations)
        q1 = np.array([o.q1 for o in obs])
        q2 = np.array([o.q2 for o in obs])
        have_ground = all(o.ground is not None for o in obs)
        ground = np.array([o.ground for o in obs]) if have_ground else None
        normal = np.array([o.normal for o in obs]) if have_ground else None
        return cls(q1, q2, ground, normal)

    def subset(self, idx) -> "ObservationSet":
        pick = lambda a: None if a is None else a[idx]
        return ObservationSet(self.q1[idx], self.q2[idx], pick(self.ground), pick(self.normal), self.height_offset[idx])

    def with_ground(self, ground, normal) -> "ObservationSet":
        return ObservationSet(self.q1, self.q2, ground, normal, self.height_offset)


def pinhole_project(pose: CameraPose, G) -> np.ndarray:
    c = pose.rotation.T @ (np.asarray(G, dtype=float) - pose.position)
    if c[2] <= 0:
        raise ValueError("point is at or behind the camera plane")
    return c / c[2]


def compose_second_pose(pose1: CameraPose, ego: EgoMotion) -> CameraPose:
    R1 = pose1.rotation
    R12 = ego.rotation
    p2 = pose1.position - R1 @ R12.T @ ego.translation
    return CameraPose(p2, dcm_to_euler(R1 @ R12.T))


def ego_between(pose1: CameraPose, pose2: CameraPose) -> EgoMotion:
    """Ego-motion taking camera-1 coordinates to camera-2 coordinates."""
    R1, R2 = pose1.rotation, pose2.rotation
    return EgoMotion(R2.T @ (pose1.position - pose2.position), dcm_to_euler(R2.T @ R1))


def second_frame_points(theta, q1, ground, normal):
    """Ground points in the second camera frame via the tangent-plane lift.

    Returns ``(c2G, depth, denom)`` where ``depth`` is the first-camera depth
    ``N.(G_E - p1) / N.(R1 q1)`` and ``denom = N.(R1 q1)``.
    """
    theta = np.asarray(theta, dtype=float)
    R1 = euler_to_dcm(*theta[ATT1])
    R12 = euler_to_dcm(*theta[ATT12])
    ray = q1 @ R1.T
    denom = np.einsum("ij,ij->i", normal, ray)
    depth = np.einsum("ij,ij->i", normal, ground - theta[P1]) / denom
    c2 = theta[P12] + (depth[:, None] * q1) @ R12.T
    return c2, depth, denom


def epipolar_residual(q1, q2, R12, p12) -> float:
    return float(np.asarray(q2) @ np.cross(p12, np.asarray(R12) @ np.asarray(q1)))


def pixel_sigma(resolution: int, fov: float) -> float:
    """Half-pixel image-plane std for a square ``resolution`` image and field of view ``fov`` (rad)."""
    return 0.5 * (2.0 * np.tan(fov / 2.0) / resolution)


def generate_observations(
    pose1: CameraPose,
    ego: EgoMotion,
    grid: DtmGrid,
    n: int,
    fov: float,
    sigma_l: float,
    seed,
    max_rounds: int = 20,
):
    """Synthesise ``n`` correspondences seen by both cameras.

    Rays are drawn uniformly over the first image (a square of half-width
    ``tan(fov / 2)``) and traced into ``grid``.  A point is kept when it
    projects inside the second image and is not occluded from the second
    camera.  ``q2`` gets isotropic Gaussian noise of std ``sigma_l`` on its
    x and y components.

    Returns ``(ObservationSet, true_ground_points)``; the set carries no
    ground points yet.
    """
    if not 0 < fov < np.pi:
        raise ValueError("fov must lie in (0, pi)")
    rng = np.random.default_rng(seed)
    half = np.tan(fov / 2.0)
    R1 = pose1.rotation
    pose2 = compose_second_pose(pose1, ego)
    R2 = pose2.rotation
    if pose1.position[2] <= grid.height(pose1.position[0], pose1.position[1], strict=False):
        raise ValueError("first camera is below the terrain")

    q1_keep, q2_keep, g_keep = [], [], []
    have = 0
    for _ in range(max_rounds):
        m = max(2 * (n - have), 16)
        uv = rng.uniform(-half, half, size=(m, 2))
        q1 = np.column_stack([uv, np.ones(m)])
        dirs = q1 @ R1.T
        ok = dirs[:, 2] < 0
        q1, dirs = q1[ok], dirs[ok]
        if len(q1) == 0:
            continue
        try:
            G, _ = intersect_rays(grid, pose1.position, dirs)
        except RayMissError:
            # Drop rays one at a time only when the batch fails.
            good = []
            for k in range(len(q1)):
                try:
                    intersect_rays(grid, pose1.position, dirs[k])
                    good.append(k)
                except RayMissError:
                    pass
            if not good:
                continue
            q1, dirs = q1[good], dirs[good]
            G, _ = intersect_rays(grid, pose1.position, dirs)
        c2 = (G - pose2.position) @ R2
        front = c2[:, 2] > 0
        q2 = np.full_like(c2, np.nan)
        q2[front] = c2[front] / c2[front, 2:3]
        vis = front & (np.abs(q2[:, 0]) <= half) & (np.abs(q2[:, 1]) <= half)
        idx = np.flatnonzero(vis)
        if idx.size:
            # Occlusion test from the second camera.
            d2 = G[idx] - pose2.position
            try:
                G2, _ = intersect_rays(grid, pose2.position, d2)
                seen = np.linalg.norm(G2 - G[idx], axis=1) < 1e-6 * (1.0 + np.linalg.norm(d2, axis=1))
            except (RayMissError, ValueError):
                seen = np.zeros(idx.size, dtype=bool)
            idx = idx[seen]
        take = idx[: n - have]
        q1_keep.append(q1[take])
        q2_keep.append(q2[take])
        g_keep.append(G[take])
        have += take.size
        if have >= n:
            break
    if have < n:
        raise ValueError(f"only {have} of {n} co-visible features found")

    q1 = np.concatenate(q1_keep)
    q2 = np.concatenate(q2_keep)
    G = np.concatenate(g_keep)
    if sigma_l > 0:
        q2 = q2.copy()
        q2[:, :2] += rng.normal(0.0, sigma_l, size=(n, 2))
    return ObservationSet(q1, q2), G
