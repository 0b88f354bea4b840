import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cooploc.geom3 import projector, random_rotation, rot_z
from cooploc.sensing import (BEARING_STREAM, VELOCITY_STREAM, CameraModel, CollocationError,
                             DegenerateBearingError, EstimateMessage, NoiseConfig, NoiseStreams,
                             bearing_from_camera, bearing_from_image, in_field_of_view,
                             noisy_bearing, noisy_velocities, perturb_bearing,
                             segment_point_distance, sense_all, substream, true_bearing, visible)
from cooploc.topology import InteractionGraph
from cooploc.world import AgentState, Pose

GRAPH = InteractionGraph(3, 2, {4: (1, 2, 3), 5: (2, 3, 4)})


def state(i, pbar, R=None, radius=0.25):
    R = np.eye(3) if R is None else R
    kind = "landmark" if i <= 3 else "vehicle"
    return AgentState(i, kind, Pose.from_inertial(R, pbar), radius=radius)


def world():
    return [state(1, (-4, 5, 3)), state(2, (4, 4, 5)), state(3, (4, -3, 4)),
            state(4, (-2, -16, 2.5)), state(5, (-2, -19, 2))]


def test_true_bearing_examples():
    np.testing.assert_allclose(true_bearing(Pose.from_inertial(np.eye(3), [0, 0, 0]), [1, 0, 0]), [-1, 0, 0])
    g = true_bearing(Pose.from_inertial(rot_z(math.pi / 2), [0, 0, 0]), [1, 0, 0])
    np.testing.assert_allclose(g, [0, 1, 0], atol=1e-15)
    with pytest.raises(CollocationError):
        true_bearing(Pose.from_inertial(np.eye(3), [1, 2, 3]), [1, 2, 3])


def test_true_bearing_random(rng):
    for _ in range(1000):
        R = random_rotation(rng)
        pose = Pose.from_inertial(R, rng.normal(size=3) * 5)
        pj = rng.normal(size=3) * 5
        g = true_bearing(pose, pj)
        assert abs(np.linalg.norm(g) - 1) < 1e-12
        np.testing.assert_allclose(projector(g) @ (pose.p - R.T @ pj), 0, atol=1e-12)
        # direction from target toward observer, in the observer frame
        assert g @ (R.T @ (pose.inertial - pj)) > 0


def test_image_bearings():
    np.testing.assert_array_equal(bearing_from_image(0, 0), [0, 0, 1])
    np.testing.assert_allclose(bearing_from_image(1, 0), np.array([1, 0, 1]) / math.sqrt(2))
    np.testing.assert_allclose(bearing_from_image(3, 4), np.array([3, 4, 1]) / math.sqrt(26))
    np.testing.assert_allclose(bearing_from_camera(3, 4), -np.array([3, 4, 1]) / math.sqrt(26))


def test_perturb_examples():
    np.testing.assert_array_equal(perturb_bearing(np.array([0, 0, 1.0]), 0, 0), [0, 0, 1])
    np.testing.assert_array_equal(perturb_bearing(np.array([0, 0, -1.0]), 0, 0), [0, 0, -1])
    ref = np.array([0.005, 0, 1]) / np.linalg.norm([0.005, 0, 1])
    np.testing.assert_allclose(perturb_bearing(np.array([0, 0, 1.0]), 0.005, 0), ref, atol=1e-16)
    with pytest.raises(DegenerateBearingError):
        perturb_bearing(np.array([1.0, 0, 0]), 0.001, 0)


unit = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).map(np.array).filter(
    lambda v: np.linalg.norm(v) > 1e-2 and abs(v[2]) / np.linalg.norm(v) > 1e-3).map(lambda v: v / np.linalg.norm(v))


@given(unit, st.floats(-0.05, 0.05), st.floats(-0.05, 0.05))
def test_perturbation_keeps_hemisphere(g, n1, n2):
    out = perturb_bearing(g, n1, n2)
    assert abs(np.linalg.norm(out) - 1) < 1e-12
    assert np.sign(out[2]) == np.sign(g[2])


def test_noisy_bearing_shrinks_with_bound(rng):
    g = np.array([0.3, -0.2, 0.9])
    g /= np.linalg.norm(g)
    assert np.array_equal(noisy_bearing(g, NoiseConfig(0, 0, 0.0), rng), g)
    spreads = []
    for b in (1e-1, 1e-2, 1e-3, 1e-4):
        nz = NoiseConfig(0, 0, b)
        spreads.append(max(np.linalg.norm(noisy_bearing(g, nz, rng) - g) for _ in range(200)))
    assert all(a > 5 * b for a, b in zip(spreads, spreads[1:]))


def test_noisy_velocities_statistics():
    nz = NoiseConfig(0.1, 0.01, 0.0)
    gen = substream(3, 4, VELOCITY_STREAM)
    draws = np.array([np.concatenate(noisy_velocities(np.zeros(3), np.zeros(3), nz, gen)) for _ in range(20000)])
    np.testing.assert_allclose(draws[:, :3].std(axis=0), 0.1, rtol=0.03)
    np.testing.assert_allclose(draws[:, 3:].std(axis=0), 0.01, rtol=0.03)
    assert np.abs(draws.mean(axis=0)).max() < 3e-3


def test_substreams_are_independent_and_reproducible():
    a = substream(7, 4, VELOCITY_STREAM).standard_normal(5)
    assert np.array_equal(a, substream(7, 4, VELOCITY_STREAM).standard_normal(5))
    assert not np.array_equal(a, substream(7, 5, VELOCITY_STREAM).standard_normal(5))
    assert not np.array_equal(a, substream(7, 4, BEARING_STREAM).standard_normal(5))
    assert not np.array_equal(a, substream(8, 4, VELOCITY_STREAM).standard_normal(5))
    # draw order across agents does not matter
    s1, s2 = NoiseStreams(7), NoiseStreams(7)
    x4 = s1.get(4, 0).standard_normal(3); x5 = s1.get(5, 0).standard_normal(3)
    y5 = s2.get(5, 0).standard_normal(3); y4 = s2.get(4, 0).standard_normal(3)
    assert np.array_equal(x4, y4) and np.array_equal(x5, y5)
    with pytest.raises(ValueError):
        substream(-1, 0, 0)


def test_camera_visibility_examples():
    cam = CameraModel(math.radians(60), math.radians(45), 20.0)
    obs = state(4, (0, 0, 0))
    ahead = state(1, (0, 0, 10))
    behind = state(2, (0, 0, -10))
    assert visible(obs, ahead, [], cam)
    assert not visible(obs, behind, [], cam)
    assert not in_field_of_view(obs, np.array([0, 0, 30.0]), cam)
    assert not in_field_of_view(obs, np.array([10, 0, 1.0]), cam)
    blocker = state(3, (0, 0, 5), radius=0.3)
    assert not visible(obs, ahead, [blocker], cam)
    # just off the segment by more than the radius
    side = state(3, (0.31, 0, 5), radius=0.3)
    assert visible(obs, ahead, [side], cam)


def test_segment_point_distance():
    a, b = np.zeros(3), np.array([10.0, 0, 0])
    assert segment_point_distance(a, b, np.array([5, 3.0, 4])) == pytest.approx(5.0)
    assert segment_point_distance(a, b, np.array([-3, 4.0, 0])) == pytest.approx(5.0)
    assert segment_point_distance(a, a, np.array([0, 0, 2.0])) == pytest.approx(2.0)


def test_visible_ignores_order_of_others(rng):
    cam = CameraModel(math.radians(60), math.radians(45), 50.0)
    for _ in range(200):
        obs = state(4, rng.normal(size=3), random_rotation(rng))
        tgt = state(1, rng.normal(size=3) * 5)
        others = [state(10 + k, rng.normal(size=3) * 3, radius=0.5) for k in range(4)]
        v = visible(obs, tgt, others, cam)
        assert v == visible(obs, tgt, others[::-1], cam)


def test_camera_model_validation():
    with pytest.raises(ValueError):
        CameraModel(h_half_angle=2.0)
    with pytest.raises(ValueError):
        CameraModel(max_range=0)
    with pytest.raises(ValueError):
        CameraModel(boresight=(0, 0, 1), right=(0, 0.6, 0.8))
    np.testing.assert_array_equal(CameraModel().axes(), np.eye(3))


def test_sense_all_full_visibility():
    snap, meas = sense_all(world(), GRAPH, None, None, None, 0.0)
    assert len(meas) == sum(GRAPH.m(i) for i in GRAPH.vehicle_ids)
    by_id = {s.id: s for s in world()}
    for m in meas:
        g = true_bearing(by_id[m.observer].pose, by_id[m.target].inertial)
        assert np.array_equal(m.g, g)
        # sign convention: projector annihilates R_i^T (pbar_i - pbar_j)
        d = by_id[m.observer].pose.R.T @ (by_id[m.observer].inertial - by_id[m.target].inertial)
        np.testing.assert_allclose(projector(m.g) @ d, 0, atol=1e-9)
    assert snap.active(5) == (2, 3, 4)


def test_sense_all_occlusion_and_blocking():
    w = world()
    # a bystander sphere on the segment from f2 to SL2
    f2, sl2 = w[4].inertial, w[1].inertial
    w.append(AgentState(6, "vehicle", Pose.from_inertial(np.eye(3), 0.5 * (f2 + sl2)), radius=0.5))
    g = InteractionGraph(3, 3, {4: (1, 2, 3), 5: (2, 3, 4), 6: (1, 2, 3)})
    cam = CameraModel(math.radians(89), math.radians(89), 100.0, boresight=(0, 1, 0), right=(1, 0, 0))
    snap, meas = sense_all(w, g, cam, None, None, 0.0)
    assert 2 not in snap.active(5)
    snap, _ = sense_all(world(), GRAPH, None, None, None, 0.0, blocked={4: [1, 3]})
    assert snap.active(4) == (2,)


def test_sense_all_noise_draws_do_not_depend_on_visibility():
    nz = NoiseConfig(0, 0, 0.005, seed=3)
    s1, s2 = NoiseStreams(3), NoiseStreams(3)
    _, m_all = sense_all(world(), GRAPH, None, nz, s1, 0.0)
    _, m_blk = sense_all(world(), GRAPH, None, nz, s2, 0.0, blocked={4: [1]})
    a = {(m.observer, m.target): m.g for m in m_all}
    b = {(m.observer, m.target): m.g for m in m_blk}
    for k, g in b.items():
        assert np.array_equal(a[k], g)
    # the next step's draws stay aligned as well
    _, n1 = sense_all(world(), GRAPH, None, nz, s1, 0.1)
    _, n2 = sense_all(world(), GRAPH, None, nz, s2, 0.1)
    assert all(np.array_equal(x.g, y.g) for x, y in zip(n1, n2))


def test_estimate_message_checks_rotation():
    with pytest.raises(ValueError):
        EstimateMessage(1, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 0.0)
    m = EstimateMessage(1, rot_z(0.3), np.array([1.0, 0, 0]), 0.0)
    np.testing.assert_allclose(m.inertial, rot_z(0.3) @ [1, 0, 0])
    assert m.path is None


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(-0.1, 0, 0)
    assert NoiseConfig.off(4) == NoiseConfig(0, 0, 0, 4)
