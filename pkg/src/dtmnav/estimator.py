"""DTM-constrained pose and ego-motion estimation.

Each correspondence gives the normalised constraint

    f_i = P(q2, q2) [p12 + R12 L_i (G_E,i - p1)] / |c2G_i|

with ``L_i = q1 N^T / (N^T R1 q1)``.  :func:`solve_pose` minimises
``sum w_i |f_i|^2`` over the 12 parameters with Gauss-Newton, falling back to
Levenberg-Marquardt, and re-weights with the Geman-McClure function each
iteration.  G_E and N are re-traced from the current pose every iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .camgeom import (
    ATT1,
    ATT12,
    P1,
    P12,
    CameraPose,
    ObservationSet,
    ParamVector,
    euler_to_dcm,
    oblique_lift,
    project,
)
from .terrain import DtmGrid, GroundPoint, RayMissError, intersect_rays, ray_intersect
from .uncertainty import (
    RCOND_FLOOR,
    SingularNormalMatrix,
    feature_terms,
    jacobian_params,
    normal_matrix,
    normal_rcond,
)

log = logging.getLogger(__name__)

MIN_FEATURES = 7


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    step_tolerance: float = 1e-8
    gn_stall_window: int = 5
    lm_initial_damping: float = 1e-3
    irls_enabled: bool = True

    def __post_init__(self):
        if self.max_iterations <= 0 or self.step_tolerance <= 0 or self.gn_stall_window <= 0:
            raise ValueError("solver settings must be positive")
        if self.lm_initial_damping <= 0:
            raise ValueError("lm_initial_damping must be positive")


@dataclass
class PoseSolution:
    params: np.ndarray
    residuals: np.ndarray  # (n, 3)
    weights: np.ndarray  # (n,)
    iterations: int
    converged: bool
    observations: ObservationSet  # traced at ``params``
    jacobian: np.ndarray  # (3n, 12) at ``params``

    @property
    def param_vector(self) -> ParamVector:
        return ParamVector.from_array(self.params)


def estimate_ground_point(guess: CameraPose, q1, grid: DtmGrid, height_offset: float = 0.0) -> GroundPoint:
    return ray_intersect(grid, guess.position, guess.rotation @ np.asarray(q1, dtype=float), height_offset)


def trace_ground(theta, obs: ObservationSet, grid: DtmGrid) -> ObservationSet:
    """Ray-trace every q1 from the first-camera pose in ``theta``."""
    theta = np.asarray(theta, dtype=float)
    R1 = euler_to_dcm(*theta[ATT1])
    G, N = intersect_rays(grid, theta[P1], obs.q1 @ R1.T, obs.height_offset)
    return obs.with_ground(G, N)


def residual(params, obs) -> np.ndarray:
    """Single-feature constraint value built from the explicit operators."""
    theta = params.as_array() if isinstance(params, ParamVector) else np.asarray(params, dtype=float)
    R1 = euler_to_dcm(*theta[ATT1])
    R12 = euler_to_dcm(*theta[ATT12])
    L = oblique_lift(obs.q1, R1, obs.normal)
    c2G = theta[P12] + R12 @ L @ (np.asarray(obs.ground) - theta[P1])
    norm = np.linalg.norm(c2G)
    if norm == 0:
        raise ValueError("ground point coincides with the second camera centre")
    return project(obs.q2, obs.q2) @ c2G / norm


def residuals(theta, obs: ObservationSet) -> np.ndarray:
    """All constraint values, shape ``(n, 3)``."""
    return feature_terms(theta, obs)["f"]


def stack_system(params, observations: ObservationSet):
    """Linear system ``A [p12; p1] = B`` for fixed rotations, 3 rows per feature."""
    theta = params.as_array() if isinstance(params, ParamVector) else np.asarray(params, dtype=float)
    obs = observations
    R1 = euler_to_dcm(*theta[ATT1])
    R12 = euler_to_dcm(*theta[ATT12])
    n = len(obs)
    A = np.zeros((3 * n, 6))
    B = np.zeros(3 * n)
    for i in range(n):
        P = project(obs.q2[i], obs.q2[i])
        M = P @ R12 @ oblique_lift(obs.q1[i], R1, obs.normal[i])
        A[3 * i:3 * i + 3, 0:3] = -P
        A[3 * i:3 * i + 3, 3:6] = M
        B[3 * i:3 * i + 3] = M @ obs.ground[i]
    return A, B


def _check_rank(A, rtol=1e-9):
    s = np.linalg.svd(A, compute_uv=False)
    if s.size < A.shape[1] or s[-1] <= rtol * s[0]:
        raise RankDeficientError("stacked translation system is rank deficient")


def solve_linear_translation(A, B):
    """Least-squares ``(p12, p1)`` through the pseudo-inverse."""
    _check_rank(A)
    x = np.linalg.pinv(A) @ B
    return x[:3], x[3:]


def rotation_residual(rot_params, observations: ObservationSet) -> np.ndarray:
    """Translation-free residual ``(I - A A^+) B`` for rotations ``(att1, att12)``."""
    rot = np.asarray(rot_params, dtype=float)
    theta = np.zeros(12)
    theta[ATT1] = rot[:3]
    theta[ATT12] = rot[3:]
    A, B = stack_system(theta, observations)
    _check_rank(A)
    return B - A @ (np.linalg.pinv(A) @ B)


def gm_weight(x):
    """Geman-McClure weight ``1 / (1 + x^2)^2``."""
    x = np.asarray(x, dtype=float)
    return 1.0 / (1.0 + x * x) ** 2


def compute_weights(residual_norms) -> np.ndarray:
    """Per-feature weights ``w(r_i / median(r))``; all ones if every residual is zero."""
    r = np.asarray(residual_norms, dtype=float)
    med = np.median(r)
    if med == 0:
        if np.all(r == 0):
            return np.ones_like(r)
        # More than half the residuals vanish: scale by the smallest nonzero one.
        med = r[r > 0].min()
    return gm_weight(r / med)


def weight_matrix(weights) -> np.ndarray:
    """Diagonal ``3n x 3n`` matrix repeating each feature weight three times."""
    return np.diag(np.repeat(np.asarray(weights, dtype=float), 3))


def _evaluate(theta, obs, grid):
    traced = trace_ground(theta, obs, grid)
    terms = feature_terms(theta, traced)
    return traced, terms


def solve_pose(initial, observations: ObservationSet, grid: DtmGrid, cfg: SolverConfig | None = None) -> PoseSolution:
    """Robust Gauss-Newton / Levenberg-Marquardt solve for the 12 parameters.

    Raises ``ValueError`` for fewer than seven features or an initial guess
    whose rays miss the map, and :class:`SingularNormalMatrix` when the
    weighted normal matrix is singular.  Running out of iterations is
    reported through ``converged=False``.
    """
    cfg = cfg or SolverConfig()
    obs = observations
    if len(obs) < MIN_FEATURES:
        raise ValueError(f"at least {MIN_FEATURES} features are required, got {len(obs)}")
    theta = initial.as_array() if isinstance(initial, ParamVector) else np.array(initial, dtype=float)
    try:
        traced, terms = _evaluate(theta, obs, grid)
    except RayMissError as exc:
        raise ValueError(f"initial guess does not intersect the map: {exc}") from exc

    mode = "gn"
    lam = cfg.lm_initial_damping
    stall = 0
    best = np.inf
    converged = False
    it = 0
    n = len(obs)
    for it in range(1, cfg.max_iterations + 1):
        f = terms["f"]
        r = np.linalg.norm(f, axis=1)
        w = compute_weights(r) if cfg.irls_enabled else np.ones(n)
        J = jacobian_params(theta, traced, terms)
        A = normal_matrix(J, w)
        g = J.T @ (np.repeat(w, 3) * f.ravel())
        cost = float(np.sum(w * r * r))
        if normal_rcond(J, w) <= RCOND_FLOOR:
            raise SingularNormalMatrix("weighted normal matrix is singular")

        step_taken = False
        delta = np.zeros(12)
        while True:
            M = A if mode == "gn" else A + lam * np.diag(np.diag(A))
            delta = np.linalg.solve(M, -g)
            cand = theta + delta
            try:
                c_traced, c_terms = _evaluate(cand, obs, grid)
                c_r = np.linalg.norm(c_terms["f"], axis=1)
                c_cost = float(np.sum(w * c_r * c_r))
            except (RayMissError, ValueError):
                c_cost = np.inf
            if mode == "gn":
                if not np.isfinite(c_cost):
                    log.debug("GN step left the map at iteration %d; switching to LM", it)
                    mode = "lm"
                    continue
                # Compare against the best cost so far: cell-edge kinks in the
                # bilinear normals can make plain GN cycle between two points.
                best = min(best, cost)
                stall = stall + 1 if c_cost >= best else 0
                if stall >= cfg.gn_stall_window:
                    log.debug("GN stalled for %d iterations; switching to LM", stall)
                    mode = "lm"
                step_taken = True
                break
            if c_cost < cost:
                lam = max(lam / 10.0, 1e-12)
                step_taken = True
                break
            lam *= 10.0
            if np.linalg.norm(delta) < cfg.step_tolerance or lam > 1e16:
                break
        if step_taken:
            theta, traced, terms = cand, c_traced, c_terms
        # Relative test: IRLS re-weighting converges only linearly.
        if np.linalg.norm(delta) < cfg.step_tolerance * (1.0 + np.linalg.norm(theta)):
            converged = True
            break

    f = terms["f"]
    r = np.linalg.norm(f, axis=1)
    w = compute_weights(r) if cfg.irls_enabled else np.ones(n)
    return PoseSolution(
        params=theta,
        residuals=f,
        weights=w,
        iterations=it,
        converged=converged,
        observations=traced,
        jacobian=jacobian_params(theta, traced, terms),
    )
