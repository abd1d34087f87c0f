"""First-order error propagation for the pose and ego-motion estimate.

Per-feature Jacobians are returned as stacks of 3x3 blocks where the full
matrix is block diagonal; :func:`block_diag_dense` expands them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camgeom import (
    ATT1,
    ATT12,
    P1,
    P12,
    ObservationSet,
    euler_derivatives,
    euler_jacobian,
    euler_to_dcm,
    second_frame_points,
)

__all__ = [
    "NoiseModel",
    "PoseCovariance",
    "SingularNormalMatrix",
    "feature_terms",
    "jacobian_params",
    "jacobian_data",
    "data_covariance",
    "param_covariance",
    "second_pose_jacobian",
    "second_pose_covariance",
    "block_diag_dense",
    "make_psd",
    "normal_matrix",
    "normal_rcond",
    "rcond",
    "pose_covariance",
    "RCOND_FLOOR",
]

RCOND_FLOOR = 1e-16


class SingularNormalMatrix(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    sigma_l: float
    sigma_h: float

    def __post_init__(self):
        if self.sigma_l < 0 or self.sigma_h < 0:
            raise ValueError("noise standard deviations must be non-negative")


@dataclass(frozen=True)
class PoseCovariance:
    full: np.ndarray
    second_frame: np.ndarray


def _projector_stack(v):
    vv = np.einsum("ni,ni->n", v, v)
    return np.eye(3)[None] - np.einsum("ni,nj->nij", v, v) / vv[:, None, None]


def feature_terms(theta, obs: ObservationSet) -> dict:
    """Shared per-feature quantities of the normalised constraint."""
    if obs.ground is None:
        raise ValueError("observations carry no ground points")
    theta = np.asarray(theta, dtype=float)
    c2, depth, denom = second_frame_points(theta, obs.q1, obs.ground, obs.normal)
    if np.any(np.abs(denom) < 1e-12):
        raise ValueError("ray parallel to the tangent plane")
    gnorm = np.linalg.norm(c2, axis=1)
    if np.any(gnorm == 0):
        raise ValueError("ground point coincides with the second camera centre")
    Pq = _projector_stack(obs.q2)
    Pg = _projector_stack(c2)
    NP = Pq @ Pg / gnorm[:, None, None]
    f = np.einsum("nij,nj->ni", Pq, c2) / gnorm[:, None]
    return {
        "c2": c2,
        "depth": depth,
        "denom": denom,
        "gnorm": gnorm,
        "Pq": Pq,
        "NP": NP,
        "f": f,
        "R1": euler_to_dcm(*theta[ATT1]),
        "R12": euler_to_dcm(*theta[ATT12]),
        "dR1": euler_derivatives(*theta[ATT1]),
        "dR12": euler_derivatives(*theta[ATT12]),
    }


def jacobian_params(theta, obs: ObservationSet, terms: dict | None = None) -> np.ndarray:
    """``dF/dtheta`` with G_E and N held fixed, shape ``(3n, 12)``."""
    t = feature_terms(theta, obs) if terms is None else terms
    q1, N = obs.q1, obs.normal
    n = len(obs)
    NP = t["NP"]
    a = np.einsum("nij,nj->ni", NP, q1 @ t["R12"].T)  # N_P R12 q1
    J = np.empty((n, 3, 12))
    J[:, :, P1] = -np.einsum("ni,nj->nij", a, N) / t["denom"][:, None, None]
    scale = t["depth"] / t["denom"]
    for k in range(3):
        ndr = np.einsum("nj,nj->n", N, q1 @ t["dR1"][k].T)
        J[:, :, 3 + k] = -a * (ndr * scale)[:, None]
    J[:, :, P12] = NP
    c1 = t["depth"][:, None] * q1
    for k in range(3):
        J[:, :, 9 + k] = np.einsum("nij,nj->ni", NP, c1 @ t["dR12"][k].T)
    return J.reshape(3 * n, 12)


def jacobian_data(theta, obs: ObservationSet, terms: dict | None = None):
    """Blocks ``df_i/dq2_i`` and ``df_i/dG_E,i``, each ``(n, 3, 3)``."""
    t = feature_terms(theta, obs) if terms is None else terms
    q2, g = obs.q2, t["c2"]
    qq = np.einsum("ni,ni->n", q2, q2)
    qg = np.einsum("ni,ni->n", q2, g)
    M = qg[:, None, None] * np.eye(3)[None] + np.einsum("ni,nj->nij", q2, g)
    Jq = -(M @ t["Pq"]) / (qq * t["gnorm"])[:, None, None]
    a = np.einsum("nij,nj->ni", t["NP"], obs.q1 @ t["R12"].T)
    JG = np.einsum("ni,nj->nij", a, obs.normal) / t["denom"][:, None, None]
    return Jq, JG


def data_covariance(obs: ObservationSet, noise: NoiseModel, theta):
    """Per-feature covariance blocks ``(Sigma_q, Sigma_G)``, each ``(n, 3, 3)``."""
    theta = np.asarray(theta, dtype=float)
    n = len(obs)
    Sq = np.zeros((n, 3, 3))
    Sq[:, 0, 0] = Sq[:, 1, 1] = noise.sigma_l**2
    R1 = euler_to_dcm(*theta[ATT1])
    ray = obs.q1 @ R1.T
    den = np.einsum("ni,ni->n", obs.normal, ray)
    if np.any(np.abs(den) < 1e-12):
        raise ValueError("grazing ray: height covariance is unbounded")
    dGdh = ray / den[:, None]
    SG = noise.sigma_h**2 * np.einsum("ni,nj->nij", dGdh, dGdh)
    return Sq, SG


def block_diag_dense(blocks) -> np.ndarray:
    blocks = np.asarray(blocks)
    n, r, c = blocks.shape
    out = np.zeros((n * r, n * c))
    for i in range(n):
        out[i * r:(i + 1) * r, i * c:(i + 1) * c] = blocks[i]
    return out


def make_psd(S) -> np.ndarray:
    """Symmetrise and clip eigenvalues below ``-1e-9 * trace`` to zero."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    floor = -1e-9 * max(np.trace(S), 0.0)
    if np.all(w >= floor):
        return S
    w = np.where(w < floor, 0.0, w)
    return 0.5 * ((V * w) @ V.T + ((V * w) @ V.T).T)


def normal_matrix(J, weights=None) -> np.ndarray:
    if weights is None:
        return J.T @ J
    wr = np.repeat(np.asarray(weights, dtype=float), 3)
    return J.T @ (wr[:, None] * J)


def rcond(A) -> float:
    """2-norm reciprocal condition number of a square matrix."""
    s = np.linalg.svd(A, compute_uv=False)
    return float(s[-1] / s[0]) if s[0] > 0 else 0.0


def normal_rcond(J, weights=None) -> float:
    """Reciprocal condition number of ``J^T W J`` from the singular values of ``sqrt(W) J``.

    Squaring the ratio of the factor's singular values avoids the roundoff
    floor of forming the normal matrix first.
    """
    if weights is not None:
        J = np.sqrt(np.repeat(np.asarray(weights, dtype=float), 3))[:, None] * J
    s = np.linalg.svd(J, compute_uv=False)
    if s.size < J.shape[1] or s[0] == 0:
        return 0.0
    return float((s[-1] / s[0]) ** 2)


def param_covariance(J_theta, J_q, J_G, Sigma_D, weights=None) -> np.ndarray:
    """Weighted pseudo-inverse propagation of the data covariance.

    ``Sigma_D`` is the ``(Sigma_q, Sigma_G)`` block pair from
    :func:`data_covariance`; ``weights`` are per-feature IRLS weights
    (``None`` means unit weights).
    """
    Sq, SG = Sigma_D
    n = J_q.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    A = normal_matrix(J_theta, w)
    if normal_rcond(J_theta, w) <= RCOND_FLOOR:
        raise SingularNormalMatrix("weighted normal matrix is singular")
    wr = np.repeat(w, 3)
    JT = np.linalg.solve(A, J_theta.T * wr[None, :])  # (12, 3n)
    F = J_q @ Sq @ J_q.transpose(0, 2, 1) + J_G @ SG @ J_G.transpose(0, 2, 1)
    JTb = JT.reshape(12, n, 3).transpose(1, 0, 2)  # (n, 12, 3)
    S = np.einsum("nai,nij,nbj->ab", JTb, F, JTb)
    return make_psd(S)


def second_pose_jacobian(theta) -> np.ndarray:
    """``d(p2, phi2, theta2, psi2) / dtheta``, shape ``(6, 12)``."""
    theta = np.asarray(theta, dtype=float)
    R1 = euler_to_dcm(*theta[ATT1])
    R12 = euler_to_dcm(*theta[ATT12])
    dR1 = euler_derivatives(*theta[ATT1])
    dR12 = euler_derivatives(*theta[ATT12])
    p12 = theta[P12]
    R2 = R1 @ R12.T
    J = np.zeros((6, 12))
    J[0:3, P1] = np.eye(3)
    J[0:3, P12] = -R2
    for k in range(3):
        J[0:3, 3 + k] = -dR1[k] @ R12.T @ p12
        J[0:3, 9 + k] = -R1 @ dR12[k].T @ p12
    dR2 = np.concatenate([dR1 @ R12.T, R1 @ dR12.transpose(0, 2, 1)])
    dang = euler_jacobian(R2, dR2)
    J[3:6, ATT1] = dang[:, :3]
    J[3:6, ATT12] = dang[:, 3:]
    return J


def second_pose_covariance(Sigma_theta, theta) -> np.ndarray:
    J = second_pose_jacobian(theta)
    return make_psd(J @ Sigma_theta @ J.T)


def pose_covariance(theta, obs: ObservationSet, noise: NoiseModel, weights=None) -> PoseCovariance:
    """Full and second-frame covariance at ``theta`` for traced observations."""
    terms = feature_terms(theta, obs)
    J = jacobian_params(theta, obs, terms)
    Jq, JG = jacobian_data(theta, obs, terms)
    S = param_covariance(J, Jq, JG, data_covariance(obs, noise, theta), weights)
    return PoseCovariance(S, second_pose_covariance(S, theta))
