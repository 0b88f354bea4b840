import math

import numpy as np
import pytest
from conftest import cached_run

from cooploc.config import ConfigError, from_dict, load_scenario
from cooploc.geom3 import exp_so3, rot_z, skew
from cooploc.world import (CAMERA_FORWARD, AgentState, Pose, Trajectory, initial_state,
                           make_scenario_agents, min_pairwise_distance, propagate, rk4_position,
                           velocities_for_trajectory)


def agent(R=None, p=(0, 0, 0), v=(0, 0, 0), w=(0, 0, 0)):
    R = np.eye(3) if R is None else R
    return AgentState(1, "vehicle", Pose(R, np.asarray(p, float)), np.asarray(v, float), np.asarray(w, float))


def test_pure_translation():
    s = propagate(agent(v=(1, 0, 0)), 1.0)
    np.testing.assert_allclose(s.pose.p, [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(s.inertial, [1, 0, 0], atol=1e-15)


def test_pure_rotation_keeps_inertial_position():
    s = agent(p=(1.0, -2.0, 0.5), w=(0, 0, 1))
    pbar0 = s.inertial
    for _ in range(10_000):
        s = propagate(s, 0.01)
    np.testing.assert_allclose(s.inertial, pbar0, atol=1e-9)


def _inertial_increment(R, v, w, dt):
    # closed form of int_0^dt R exp(S(w) s) v ds
    th = np.linalg.norm(w)
    if th < 1e-12:
        return R @ v * dt
    K = skew(w)
    J = dt * np.eye(3) + (1 - math.cos(th * dt)) / th ** 2 * K + (th * dt - math.sin(th * dt)) / th ** 3 * K @ K
    return R @ J @ v


def test_frame_consistency_60s(rng):
    dt = 1 / 60
    s = agent(R=exp_so3(rng.normal(size=3)), p=rng.normal(size=3))
    pbar = s.inertial
    for k in range(3600):
        t = k * dt
        v = np.array([math.sin(0.3 * t), 0.5 * math.cos(0.2 * t), 0.1])
        w = np.array([0.2 * math.sin(t), -0.1, 0.3 * math.cos(0.5 * t)])
        s = s.with_inputs(v, w)
        pbar = pbar + _inertial_increment(s.pose.R, v, w, dt)
        s = propagate(s, dt)
    assert np.linalg.norm(s.inertial - pbar) < 1e-6


def test_rk4_position_matches_stages(rng):
    p, v, w = rng.normal(size=(3, 3))
    dt = 0.05
    f = lambda x: v - skew(w) @ x
    k1 = f(p); k2 = f(p + dt / 2 * k1); k3 = f(p + dt / 2 * k2); k4 = f(p + dt * k3)
    np.testing.assert_allclose(rk4_position(p, v, w, dt), p + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4), atol=1e-14)


def test_propagate_deterministic(rng):
    s = agent(R=exp_so3(rng.normal(size=3)), p=rng.normal(size=3), v=rng.normal(size=3), w=rng.normal(size=3))
    a, b = propagate(s, 0.01), propagate(s, 0.01)
    assert np.array_equal(a.pose.R, b.pose.R) and np.array_equal(a.pose.p, b.pose.p)
    with pytest.raises(ValueError):
        propagate(s, 0.0)


def test_busy_intersection_trajectories():
    cfg = load_scenario("busy_intersection")
    f1 = cfg.agents[3]
    assert f1.name == "f1"
    np.testing.assert_allclose(f1.trajectory.position(10.0), [-2, -10, 2.5], atol=1e-12)
    states = make_scenario_agents(cfg)
    assert [s.kind for s in states] == ["landmark"] * 3 + ["vehicle"] * 5
    np.testing.assert_allclose(states[7].inertial, [-30, 2, 3], atol=1e-12)
    for t in (0.0, 7.3, 59.0):
        v, w = velocities_for_trajectory(f1.trajectory, t)
        np.testing.assert_allclose(v, [0, 0.6, 0], atol=1e-15)
        assert not w.any()
    v, w = velocities_for_trajectory(cfg.agents[0].trajectory, 3.0)
    assert not v.any() and not w.any()


def _landmarks_only(n):
    return {"agents": [{"name": f"L{k}", "kind": "landmark", "trajectory": {"kind": "static", "start": [k, 0, 1]}}
                       for k in range(n)]}


def test_landmark_only_scenario():
    cfg = from_dict(_landmarks_only(3))
    states = make_scenario_agents(cfg)
    assert len(states) == 3 and all(s.is_landmark for s in states)


def test_two_landmarks_rejected():
    with pytest.raises(ConfigError, match="at least three landmark agents"):
        from_dict(_landmarks_only(2))


def test_waypoint_turn_reintegrates():
    wp = [[0, 0, 0, 0], [5, 5, 0, 0], [10, 9, 2, 0], [15, 10, 7, 0], [20, 10, 12, 0]]
    traj = Trajectory("waypoint", waypoints=wp, orientation="heading")
    s = initial_state(1, "vehicle", traj)
    dt = 1e-3
    wz = []
    for k in range(20_000):
        v, w = velocities_for_trajectory(traj, (k + 0.5) * dt)
        wz.append(w)
        s = propagate(s.with_inputs(v, w), dt)
        t = (k + 1) * dt
        if abs(t - round(t / 5) * 5) < 1e-9:
            np.testing.assert_allclose(s.inertial, wp[int(round(t / 5))][1:], atol=1e-3)
    wz = np.array(wz)
    assert np.abs(wz[:, :2]).max() < 1e-12
    peak = np.argmax(np.abs(wz[:, 2]))
    assert 5_000 < peak < 15_000
    # the yaw rate integrates to the heading change, roughly a quarter turn
    turn = traj.heading(20.0)[0] - traj.heading(0.0)[0]
    assert wz[:, 2].sum() * dt == pytest.approx(turn, abs=1e-4)
    assert 1.3 < turn < 1.9


def test_heading_with_camera_mount():
    traj = Trajectory("linear", velocity=[0, 1, 0], orientation="heading", mount="camera_forward")
    R = traj.rotation(0.0)
    np.testing.assert_allclose(R, rot_z(math.pi / 2) @ CAMERA_FORWARD, atol=1e-15)
    # the optical axis points along the direction of travel
    np.testing.assert_allclose(R @ [0, 0, 1], [0, 1, 0], atol=1e-15)


def test_expression_trajectory():
    traj = Trajectory("expression", expression=("cos(t)", "sin(t)", "0.5*t"), orientation="heading")
    np.testing.assert_allclose(traj.position(0.0), [1, 0, 0])
    np.testing.assert_allclose(traj.inertial_velocity(1.0), [-math.sin(1), math.cos(1), 0.5])
    _, rate = traj.heading(2.0)
    assert rate == pytest.approx(1.0)
    with pytest.raises(ValueError, match="unknown symbols"):
        Trajectory("expression", expression=("x", "0", "0"))


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory("spiral")
    with pytest.raises(ValueError):
        Trajectory("waypoint", waypoints=[[0, 0, 0, 0], [0, 1, 1, 1]])
    with pytest.raises(ValueError):
        Trajectory(mount="upside_down")


@pytest.mark.parametrize("name", ["busy_intersection", "crossing_path", "overtaking"])
def test_shipped_scenarios_never_collocate(name):
    cfg, recs, _ = cached_run(name)
    for r in recs:
        pts = [v.truth_pbar for v in r.vehicles.values()] + list(r.landmarks.values())
        P = np.array(pts)
        d = np.linalg.norm(P[:, None] - P[None], axis=-1) + np.eye(len(P)) * 1e9
        assert d.min() > 0.1


def test_min_pairwise_distance():
    a = agent(p=(0, 0, 0))
    b = AgentState(2, "vehicle", Pose(np.eye(3), np.array([3.0, 4.0, 0.0])))
    assert min_pairwise_distance([a, b]) == 5.0
    assert min_pairwise_distance([a]) == math.inf
