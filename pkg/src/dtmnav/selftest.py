"""Fast built-in oracle checks behind ``dtm-nav selftest``."""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from .camgeom import ParamVector, compose_second_pose, generate_observations
from .estimator import SolverConfig, solve_pose, trace_ground
from .insekf import ImuConfig, navigation_errors, propagate_ins, simulate_trajectory, start_ins
from .scenario import ScenarioConfig, build_terrain, perturb, trial_geometry
from .uncertainty import feature_terms, jacobian_data, jacobian_params, second_pose_jacobian

_EPS = 1e-6


def _scenario(k, n=30):
    cfg = ScenarioConfig(features=n)
    truth, dtm, _ = build_terrain(replace(cfg, terrain=replace(cfg.terrain, spacing=30.0)))
    rng = np.random.default_rng(1000 + k)
    pose, ego = trial_geometry(cfg, dtm, rng)
    obs, _ = generate_observations(pose, ego, dtm, n, cfg.camera.fov, 0.0, 2000 + k)
    theta = ParamVector(pose, ego).as_array()
    return cfg, dtm, obs, theta, rng


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def check_exact_recovery(trials=3):
    worst = 0.0
    for k in range(trials):
        cfg, dtm, obs, theta, rng = _scenario(k, 60)
        sol = solve_pose(perturb(theta, cfg.trial, rng), obs, dtm, SolverConfig())
        worst = max(worst, float(np.max(np.abs(sol.params[[0, 1, 2, 6, 7, 8]] - theta[[0, 1, 2, 6, 7, 8]]))))
    return worst < 1e-6, f"max position error {worst:.2e} m"


def check_parameter_jacobian(trials=3):
    worst = 0.0
    for k in range(trials):
        _, dtm, obs, theta, _ = _scenario(k)
        traced = trace_ground(theta, obs, dtm)
        J = jacobian_params(theta, traced)
        fd = np.empty_like(J)
        for j in range(12):
            d = np.zeros(12)
            d[j] = _EPS
            fd[:, j] = (feature_terms(theta + d, traced)["f"] - feature_terms(theta - d, traced)["f"]).ravel() / (2 * _EPS)
        worst = max(worst, _rel(J, fd))
    return worst < 1e-5, f"max relative error {worst:.2e}"


def check_data_jacobians(trials=3):
    worst = 0.0
    for k in range(trials):
        _, dtm, obs, theta, _ = _scenario(k, 8)
        traced = trace_ground(theta, obs, dtm)
        Jq, JG = jacobian_data(theta, traced)
        for name, J in (("q2", Jq), ("ground", JG)):
            for j in range(3):
                plus, minus = replace_field(traced, name, j, _EPS), replace_field(traced, name, j, -_EPS)
                fd = (feature_terms(theta, plus)["f"] - feature_terms(theta, minus)["f"]) / (2 * _EPS)
                worst = max(worst, _rel(J[:, :, j], fd))
    return worst < 1e-5, f"max relative error {worst:.2e}"


def replace_field(obs, name, j, eps):
    arr = getattr(obs, name).copy()
    arr[:, j] += eps
    out = obs.with_ground(obs.ground.copy(), obs.normal)
    setattr(out, name, arr)
    return out


def check_second_pose_jacobian(trials=3):
    worst = 0.0
    for k in range(trials):
        _, _, _, theta, _ = _scenario(k)
        J = second_pose_jacobian(theta)

        def c2(t):
            p = ParamVector.from_array(t)
            s = compose_second_pose(p.pose, p.ego)
            return np.concatenate([s.position, s.attitude])

        fd = np.column_stack([(c2(theta + e) - c2(theta - e)) / (2 * _EPS) for e in np.eye(12) * _EPS])
        worst = max(worst, _rel(J, fd))
    return worst < 1e-5, f"max relative error {worst:.2e}"


def check_constraint_at_truth(trials=5):
    worst = 0.0
    for k in range(trials):
        _, dtm, obs, theta, _ = _scenario(k)
        worst = max(worst, float(np.max(np.abs(feature_terms(theta, trace_ground(theta, obs, dtm))["f"]))))
    return worst < 1e-9, f"max residual {worst:.2e}"


def check_noiseless_ins():
    cfg = ImuConfig(accel_noise=0.0, gyro_noise=0.0, accel_bias=0.0, gyro_bias=0.0, bias_walk=0.0)
    wp = np.array([[0, 0, 0, 1000, 200], [0, 4000, 0, 1000, 200], [0, 4000, 3000, 1000, 200]], dtype=float)
    track = simulate_trajectory(wp, 30.0, cfg.dt)
    ins = start_ins(track, cfg, 0)
    for _ in range(track.n_ticks):
        ins = propagate_ins(ins)
    err = float(np.max(np.abs(navigation_errors(ins))))
    return err < 1e-9, f"max navigation error {err:.2e}"


CHECKS = [
    ("exact recovery", check_exact_recovery),
    ("parameter jacobian", check_parameter_jacobian),
    ("data jacobians", check_data_jacobians),
    ("second pose jacobian", check_second_pose_jacobian),
    ("constraint at truth", check_constraint_at_truth),
    ("noiseless ins", check_noiseless_ins),
]


def run(out=print) -> bool:
    ok = True
    for name, fn in CHECKS:
        t = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # a crash is a failed check, reported like any other
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'}  {name:<22} {detail} ({time.perf_counter() - t:.1f} s)")
    return ok
