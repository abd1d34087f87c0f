"""Rotation conventions, projection operators, pose chains and synthetic data."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtmnav.camgeom import (
    CameraPose,
    EgoMotion,
    GimbalLockError,
    ObservationSet,
    ParamVector,
    compose_second_pose,
    dcm_to_euler,
    ego_between,
    epipolar_residual,
    euler_derivatives,
    euler_jacobian,
    euler_to_dcm,
    generate_observations,
    oblique_lift,
    pinhole_project,
    pixel_sigma,
    project,
    skew,
)
from dtmnav.terrain import build_grid, synth_terrain

angles = st.tuples(
    st.floats(-np.pi + 1e-3, np.pi - 1e-3),
    st.floats(-np.pi / 2 + 1e-3, np.pi / 2 - 1e-3),
    st.floats(-np.pi + 1e-3, np.pi - 1e-3),
)
vec3 = st.tuples(*[st.floats(-1, 1)] * 3).map(np.array)


@pytest.fixture(scope="module")
def terrain():
    return synth_terrain(1, 3000.0, 300.0, 30.0)


@pytest.fixture
def nadir_pose(terrain):
    return CameraPose([1500.0, 1500.0, terrain.height(1500.0, 1500.0) + 500.0], [np.pi + 0.05, 0.03, 1.0])


# ---- rotations --------------------------------------------------------------

def test_identity_rotation():
    np.testing.assert_array_equal(euler_to_dcm(0, 0, 0), np.eye(3))
    np.testing.assert_array_equal(dcm_to_euler(np.eye(3)), [0, 0, 0])


def test_yaw_quarter_turn_matches_elementary_matrix():
    expected = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(euler_to_dcm(0, 0, np.pi / 2), expected, atol=1e-15)


def test_composition_order():
    # roll applied last: Phi @ Theta @ Psi
    phi, th, psi = 0.3, -0.2, 1.1
    np.testing.assert_allclose(
        euler_to_dcm(phi, th, psi),
        euler_to_dcm(phi, 0, 0) @ euler_to_dcm(0, th, 0) @ euler_to_dcm(0, 0, psi),
        atol=1e-15,
    )


@settings(max_examples=200)
@given(angles)
def test_orthonormal_and_roundtrip(a):
    R = euler_to_dcm(*a)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(dcm_to_euler(R), a, atol=1e-10)


def test_gimbal_lock_is_reported():
    with pytest.raises(GimbalLockError):
        dcm_to_euler(euler_to_dcm(0.1, np.pi / 2 - 1e-12, 0.2))


@settings(max_examples=30)
@given(angles)
def test_euler_derivatives_match_finite_differences(a):
    a = np.array(a)
    e = 1e-6
    fd = np.stack([(euler_to_dcm(*(a + d)) - euler_to_dcm(*(a - d))) / (2 * e) for d in np.eye(3) * e])
    np.testing.assert_allclose(euler_derivatives(*a), fd, atol=1e-8)


@settings(max_examples=30)
@given(angles)
def test_euler_jacobian_inverts_derivatives(a):
    R = euler_to_dcm(*a)
    np.testing.assert_allclose(euler_jacobian(R, euler_derivatives(*a)), np.eye(3), atol=1e-8)


def test_skew_is_cross_product():
    a, b = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.7, -1.1])
    np.testing.assert_allclose(skew(a) @ b, np.cross(a, b))


# ---- projection operators ---------------------------------------------------

@settings(max_examples=100)
@given(vec3, vec3, vec3)
def test_projection_identities(u, s, v):
    if abs(s @ u) < 1e-3:
        return
    P = project(u, s)
    np.testing.assert_allclose(P @ u, 0, atol=1e-9)
    assert s @ (P @ v) == pytest.approx(0, abs=1e-9)
    np.testing.assert_allclose(P @ P, P, atol=1e-9)


def test_projection_axis_case_and_error():
    e3 = np.array([0.0, 0.0, 1.0])
    np.testing.assert_array_equal(project(e3, e3), np.diag([1.0, 1.0, 0.0]))
    with pytest.raises(ValueError):
        project([1, 0, 0], [0, 1, 0])


@settings(max_examples=50)
@given(vec3.filter(lambda q: np.linalg.norm(q[:2]) < 0.9))
def test_self_projection_is_symmetric_psd_rank_two(q):
    q = np.array([q[0], q[1], 1.0])
    P = project(q, q)
    np.testing.assert_allclose(P, P.T, atol=1e-12)
    w = np.linalg.eigvalsh(P)
    assert w.min() > -1e-12
    assert np.linalg.matrix_rank(P, tol=1e-9) == 2


@settings(max_examples=50)
@given(angles, vec3, vec3)
def test_oblique_lift_identities(a, v, n_xy):
    R1 = euler_to_dcm(*a)
    q1 = np.array([0.2, -0.1, 1.0])
    N = np.array([n_xy[0], n_xy[1], 1.0])
    if abs(N @ R1 @ q1) < 1e-2:
        return
    L = oblique_lift(q1, R1, N)
    # kernel is the tangent plane
    w = np.cross(N, v)
    np.testing.assert_allclose(L @ w, 0, atol=1e-9)
    assert N @ (R1 @ L @ v) == pytest.approx(N @ v, abs=1e-9)


def test_oblique_lift_axis_case_and_error():
    e3 = np.array([0.0, 0.0, 1.0])
    np.testing.assert_array_equal(oblique_lift(e3, np.eye(3), e3), np.outer(e3, e3))
    with pytest.raises(ValueError):
        oblique_lift(e3, np.eye(3), [1.0, 0.0, 0.0])


# ---- pinhole and pose chain ---------------------------------------------------

def test_pinhole_examples():
    pose = CameraPose([0, 0, 0], [0, 0, 0])
    np.testing.assert_array_equal(pinhole_project(pose, [0, 0, 5]), [0, 0, 1])
    np.testing.assert_array_equal(pinhole_project(pose, [1, 2, 2]), [0.5, 1, 1])
    with pytest.raises(ValueError):
        pinhole_project(pose, [0, 0, -1])


def test_compose_identities():
    p1 = CameraPose([10.0, 20.0, 30.0], [0.1, 0.2, 0.3])
    same = compose_second_pose(p1, EgoMotion([0, 0, 0], [0, 0, 0]))
    np.testing.assert_allclose(same.position, p1.position)
    np.testing.assert_allclose(same.attitude, p1.attitude, atol=1e-14)
    shifted = compose_second_pose(CameraPose([5.0, 0, 0], [0, 0, 0]), EgoMotion([1.0, 0, 0], [0, 0, 0]))
    np.testing.assert_allclose(shifted.position, [4.0, 0, 0])


@settings(max_examples=50)
@given(angles, angles, vec3, vec3)
def test_frame_chain_consistency(a1, a12, p12, G):
    a12 = tuple(0.3 * x for x in a12)
    pose1 = CameraPose([1.0, 2.0, 3.0], a1)
    ego = EgoMotion(10 * p12, a12)
    pose2 = compose_second_pose(pose1, ego)
    G = 100 * G
    c1 = pose1.rotation.T @ (G - pose1.position)
    via_ego = ego.rotation @ c1 + ego.translation
    direct = pose2.rotation.T @ (G - pose2.position)
    np.testing.assert_allclose(via_ego, direct, atol=1e-9)


@settings(max_examples=50)
@given(angles, angles, vec3)
def test_ego_between_inverts_compose(a1, a12, p12):
    a12 = tuple(0.3 * x for x in a12)
    pose1 = CameraPose([1.0, 2.0, 3.0], a1)
    ego = EgoMotion(10 * p12, a12)
    back = ego_between(pose1, compose_second_pose(pose1, ego))
    np.testing.assert_allclose(back.translation, ego.translation, atol=1e-9)
    np.testing.assert_allclose(back.rotation, ego.rotation, atol=1e-12)


def test_param_vector_roundtrip():
    theta = np.arange(12, dtype=float) / 10
    np.testing.assert_array_equal(ParamVector.from_array(theta).as_array(), theta)


# ---- epipolar residual --------------------------------------------------------

def test_epipolar_trivial_cases():
    q1 = np.array([0.1, 0.2, 1.0])
    R = euler_to_dcm(0.1, 0.2, 0.3)
    assert epipolar_residual(q1, [0.3, -0.1, 1.0], R, np.zeros(3)) == 0.0
    assert epipolar_residual(q1, R @ q1 / (R @ q1)[2], R, [1.0, 2.0, 3.0]) == pytest.approx(0.0, abs=1e-15)


def test_epipolar_vanishes_on_exact_correspondences(terrain, nadir_pose):
    ego = EgoMotion([20.0, -30.0, 10.0], [0.05, -0.1, 0.08])
    obs, G = generate_observations(nadir_pose, ego, terrain, 50, np.radians(60), 0.0, 4)
    r = [epipolar_residual(a, b, ego.rotation, ego.translation) for a, b in zip(obs.q1, obs.q2)]
    assert np.max(np.abs(r)) < 1e-10


# ---- synthetic observations -------------------------------------------------

def test_pixel_sigma_half_pixel_rule():
    assert pixel_sigma(1000, np.radians(60)) == pytest.approx(0.5 * 2 * np.tan(np.radians(30)) / 1000)


def test_noiseless_observations_reproject(terrain, nadir_pose):
    ego = EgoMotion([30.0, 10.0, -5.0], [0.1, 0.05, -0.08])
    obs, G = generate_observations(nadir_pose, ego, terrain, 40, np.radians(60), 0.0, 1)
    pose2 = compose_second_pose(nadir_pose, ego)
    for q1, q2, g in zip(obs.q1, obs.q2, G):
        np.testing.assert_allclose(pinhole_project(nadir_pose, g), q1, atol=1e-9)
        np.testing.assert_allclose(pinhole_project(pose2, g), q2, atol=1e-9)
    np.testing.assert_allclose(G[:, 2], terrain.height(G[:, 0], G[:, 1]), atol=1e-6)
    assert obs.ground is None


def test_observations_are_deterministic_and_in_fov(terrain, nadir_pose):
    ego = EgoMotion([30.0, 10.0, -5.0], [0.1, 0.05, -0.08])
    fov = np.radians(60)
    a, _ = generate_observations(nadir_pose, ego, terrain, 80, fov, 1e-3, 9)
    b, _ = generate_observations(nadir_pose, ego, terrain, 80, fov, 1e-3, 9)
    np.testing.assert_array_equal(a.q1, b.q1)
    np.testing.assert_array_equal(a.q2, b.q2)
    half = np.tan(fov / 2)
    assert np.all(np.abs(a.q1[:, :2]) <= half)
    np.testing.assert_array_equal(a.q1[:, 2], 1.0)
    np.testing.assert_array_equal(a.q2[:, 2], 1.0)
    assert len(a) == 80


def test_noise_statistics(terrain, nadir_pose):
    ego = EgoMotion([30.0, 10.0, -5.0], [0.1, 0.05, -0.08])
    clean, _ = generate_observations(nadir_pose, ego, terrain, 2000, np.radians(60), 0.0, 3)
    noisy, _ = generate_observations(nadir_pose, ego, terrain, 2000, np.radians(60), 0.01, 3)
    # same seed draws the same rays, so the difference is the image noise
    d = noisy.q2[:, :2] - clean.q2[:, :2]
    assert np.std(d) == pytest.approx(0.01, rel=0.05)
    assert abs(np.mean(d)) < 3 * 0.01 / np.sqrt(d.size)


def test_generation_errors(nadir_pose):
    flat = build_grid(np.zeros((3, 3)), 10.0)
    with pytest.raises(ValueError):
        generate_observations(nadir_pose, EgoMotion([0, 0, 0], [0, 0, 0]), flat, 10, 0.0, 0.0, 0)
    with pytest.raises(ValueError):
        generate_observations(nadir_pose, EgoMotion([0, 0, 0], [0, 0, 0]), flat, 10, np.radians(60), 0.0, 0)


def test_observation_set_validation():
    with pytest.raises(ValueError):
        ObservationSet(np.ones((3, 3)), np.ones((4, 3)))
