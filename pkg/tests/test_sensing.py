"""Depth scan, observation, and auxiliary ground-truth tests."""

import math

import numpy as np
import pytest

from contactnav.config import SensingConfig, WorldConfig
from contactnav.errors import ContractViolationError
from contactnav.sensing import (
    AuxTargets,
    ScanHistory,
    aux_ground_truth,
    build_observation,
    raycast_scan,
    ray_bearings,
    wrap_angle,
)
from contactnav.world import CorridorWorld, GlobalPath, generate_corridor

NO_PEDS = np.zeros((0, 2))
ROBOT_R = 0.3
PED_R = 0.25


def scan(walls, peds, robot_pos, heading=0.0, cfg=None):
    cfg = cfg or SensingConfig()
    return raycast_scan(np.asarray(walls, float).reshape(-1, 4),
                        np.asarray(peds, float).reshape(-1, 2),
                        PED_R, np.asarray(robot_pos, float), ROBOT_R, heading, cfg)


def straight_path(length=6.0):
    wp = np.array([[0.0, 0.0], [length, 0.0]])
    cum = np.array([0.0, length])
    return GlobalPath(waypoints=wp, arc_length=length, cumulative=cum)


class TestRaycastScan:
    def test_empty_long_corridor_center_ray(self):
        # walls far beyond max range on all sides
        walls = [[-1.0, -20.0, -1.0, 20.0]]
        s = scan(walls, NO_PEDS, (0.0, 0.0))
        center = SensingConfig().num_rays // 2
        assert s.ranges[center] == 1.0

    def test_wall_two_meters_ahead(self):
        # surface distance 2 m on the centre ray: 2/5 = 0.4
        walls = [[2.0 + ROBOT_R, -10.0, 2.0 + ROBOT_R, 10.0]]
        s = scan(walls, NO_PEDS, (0.0, 0.0))
        center_bearings = ray_bearings(0.0, SensingConfig())
        i = int(np.argmin(np.abs(center_bearings)))
        # the fan has an even ray count, so the most-central ray is slightly
        # off-axis; compare against its exact geometric distance
        expected = (2.0 + ROBOT_R) / math.cos(center_bearings[i]) - ROBOT_R
        assert s.ranges[i] == pytest.approx(expected / 5.0, abs=1e-9)
        assert abs(s.ranges[i] - 0.4) < 1e-3

    def test_blind_zone_reports_max(self):
        # pedestrian surface 0.2 m ahead of the robot surface: invisible
        d = ROBOT_R + 0.2 + PED_R
        s = scan(NO_PEDS.reshape(0, 4), [[d, 0.0]], (0.0, 0.0))
        center = int(np.argmin(np.abs(ray_bearings(0.0, SensingConfig()))))
        assert s.ranges[center] == 1.0

    def test_blind_zone_disabled_reports_true_range(self):
        cfg = SensingConfig(blind_zone_enabled=False)
        d = ROBOT_R + 0.2 + PED_R
        s = scan(NO_PEDS.reshape(0, 4), [[d, 0.0]], (0.0, 0.0), cfg=cfg)
        center = int(np.argmin(np.abs(ray_bearings(0.0, cfg))))
        assert s.ranges[center] == pytest.approx(0.2 / 5.0, abs=1e-3)

    def test_values_in_range(self):
        world = generate_corridor(4, WorldConfig())
        s = scan(world.walls, [[world.start_xy[0] + 1.0, world.start_xy[1]]],
                 world.start_xy)
        lo = SensingConfig().min_range / SensingConfig().max_range
        ok = (s.ranges == 1.0) | ((s.ranges >= lo) & (s.ranges <= 1.0))
        assert np.all(ok)

    def test_rotation_consistency(self):
        # rotate camera by delta and world contents by -delta about the robot:
        # identical scans
        delta = 0.7
        robot = np.array([1.0, 0.5])
        walls = np.array([[3.0, -2.0, 3.0, 3.0], [0.0, 2.0, 4.0, 2.5]])
        peds = np.array([[2.0, 0.3], [1.5, -0.7]])

        def rotate(points, ang):
            c, s_ = math.cos(ang), math.sin(ang)
            R = np.array([[c, -s_], [s_, c]])
            return (points - robot) @ R.T + robot

        s1 = scan(walls, peds, robot, heading=delta)
        w2 = np.hstack([rotate(walls[:, :2], -delta), rotate(walls[:, 2:], -delta)])
        p2 = rotate(peds, -delta)
        s2 = scan(w2, p2, robot, heading=0.0)
        assert np.allclose(s1.ranges, s2.ranges, atol=1e-6)

    def test_monotone_until_blind_jump(self):
        cfg = SensingConfig()
        center = int(np.argmin(np.abs(ray_bearings(0.0, cfg))))
        values = []
        for d in np.arange(3.0, 0.05, -0.05):
            ped_x = ROBOT_R + d + PED_R  # surface distance d ahead
            s = scan(NO_PEDS.reshape(0, 4), [[ped_x, 0.0]], (0.0, 0.0), cfg=cfg)
            values.append(s.ranges[center])
        values = np.array(values)
        jumps = np.nonzero(np.diff(values) > 0.0)[0]
        # non-increasing during approach, then one jump to 1.0 at the blind zone
        assert len(jumps) == 1
        assert values[jumps[0] + 1] == 1.0
        before = values[: jumps[0] + 1]
        assert np.all(np.diff(before) <= 1e-12)

    def test_inside_pedestrian_is_blind(self):
        s = scan(NO_PEDS.reshape(0, 4), [[0.1, 0.0]], (0.0, 0.0))
        assert np.all(s.ranges[s.ranges != 1.0] >= 0.05)


class TestScanHistory:
    def test_initial_fill_and_push(self):
        cfg = SensingConfig()
        s0 = scan([[5.0, -5.0, 5.0, 5.0]], NO_PEDS, (0.0, 0.0))
        hist = ScanHistory(s0, cfg.history_length)
        st = hist.stacked()
        assert st.shape == (4, cfg.num_rays)
        assert np.array_equal(st[0], st[3])
        s1 = scan([[4.0, -5.0, 4.0, 5.0]], NO_PEDS, (0.0, 0.0))
        hist.push(s1)
        st = hist.stacked()
        assert np.array_equal(st[3], s1.ranges)
        assert np.array_equal(st[2], s0.ranges)


class TestBuildObservation:
    def _obs(self, robot_pos=(0.0, 0.0), velocity=(0.0, 0.0), heading=0.0,
             progress=0.0, prev_action=(0.0, 0.0, 0.0), ratio=0.0,
             impulse=(0.0, 0.0), path=None):
        cfg = SensingConfig()
        s0 = scan([[50.0, -50.0, 50.0, 50.0]], NO_PEDS, robot_pos)
        hist = ScanHistory(s0, cfg.history_length)
        return build_observation(
            hist, np.asarray(robot_pos, float), np.asarray(velocity, float),
            heading, path or straight_path(), progress,
            np.asarray(prev_action, float), ratio, np.asarray(impulse, float),
            v_max=1.0, lookahead=0.3,
        )

    def test_rest_first_step(self):
        obs = self._obs()
        assert obs.scans.shape == (4, 64)
        assert np.array_equal(obs.scans[0], obs.scans[3])
        assert obs.state[0] == 0.0 and obs.state[1] == 0.0  # velocity
        assert obs.state[11] == 0.0  # force ratio
        assert obs.state[12] == 0.0 and obs.state[13] == 0.0  # contact dir

    def test_force_ratio_feature(self):
        obs = self._obs(ratio=0.5)
        assert obs.state[11] == 0.5  # 65 N / 130 N
        obs = self._obs(ratio=1.7)
        assert obs.state[11] == 1.0  # clipped

    def test_heading_error_zero_when_facing_waypoint(self):
        obs = self._obs(robot_pos=(1.0, 0.0), heading=0.0, progress=1.0)
        assert obs.state[4] == pytest.approx(0.0, abs=1e-12)  # sin
        assert obs.state[5] == pytest.approx(1.0, abs=1e-12)  # cos

    def test_all_features_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            obs = self._obs(
                robot_pos=rng.normal(0, 2, 2), velocity=rng.normal(0, 1, 2),
                heading=float(rng.uniform(-math.pi, math.pi)),
                progress=float(rng.uniform(0, 6)),
                prev_action=(rng.uniform(0, 1), rng.uniform(-math.pi, math.pi),
                             rng.uniform(-math.pi, math.pi)),
                ratio=float(rng.uniform(0, 2)),
                impulse=rng.normal(0, 5, 2),
            )
            assert np.all(np.isfinite(obs.state))
            assert np.all(obs.state >= -1.0 - 1e-12)
            assert np.all(obs.state <= 1.0 + 1e-12)

    def test_translation_invariance(self):
        # identical relative geometry at a global offset: identical features
        offset = np.array([13.0, -4.0])
        path1 = straight_path()
        path2 = GlobalPath(waypoints=path1.waypoints + offset,
                           arc_length=path1.arc_length, cumulative=path1.cumulative)
        cfg = SensingConfig()
        walls1 = np.array([[3.0, -2.0, 3.0, 2.0]])
        walls2 = np.hstack([walls1[:, :2] + offset, walls1[:, 2:] + offset])
        s1 = scan(walls1, NO_PEDS, (0.5, 0.1))
        s2 = scan(walls2, NO_PEDS, offset + (0.5, 0.1))
        h1 = ScanHistory(s1, cfg.history_length)
        h2 = ScanHistory(s2, cfg.history_length)
        o1 = build_observation(h1, np.array([0.5, 0.1]), np.array([0.2, 0.0]), 0.3,
                               path1, 0.4, np.zeros(3), 0.0, np.zeros(2), 1.0, 0.3)
        o2 = build_observation(h2, offset + (0.5, 0.1), np.array([0.2, 0.0]), 0.3,
                               path2, 0.4, np.zeros(3), 0.0, np.zeros(2), 1.0, 0.3)
        assert np.allclose(o1.state, o2.state, atol=1e-9)
        assert np.allclose(o1.scans, o2.scans, atol=1e-9)

    def test_empty_path_rejected(self):
        cfg = SensingConfig()
        s0 = scan([[5.0, -5.0, 5.0, 5.0]], NO_PEDS, (0.0, 0.0))
        hist = ScanHistory(s0, cfg.history_length)
        empty = GlobalPath(waypoints=np.zeros((0, 2)), arc_length=0.0,
                           cumulative=np.zeros(0))
        with pytest.raises(ContractViolationError):
            build_observation(hist, np.zeros(2), np.zeros(2), 0.0, empty, 0.0,
                              np.zeros(3), 0.0, np.zeros(2), 1.0, 0.3)


class TestAuxGroundTruth:
    def _world(self, width=2.0):
        return CorridorWorld(
            walls=np.array([
                [0.0, 0.0, 10.0, 0.0], [0.0, width, 10.0, width],
                [0.0, 0.0, 0.0, width], [10.0, 0.0, 10.0, width],
            ]),
            width=width, length=10.0,
            start_xy=np.array([1.0, width / 2]), start_camera_heading=0.0,
            goal_xy=np.array([6.0, width / 2]), free_area=width * 10.0, seed=0,
        )

    def test_centered_wall_distances(self):
        world = self._world(2.0)
        t = aux_ground_truth(world, NO_PEDS, PED_R, np.array([5.0, 1.0]), ROBOT_R,
                             0.0, SensingConfig())
        assert t.wall_left * 5.0 == pytest.approx(0.7, abs=1e-9)
        assert t.wall_right * 5.0 == pytest.approx(0.7, abs=1e-9)

    def test_no_pedestrian_in_fov(self):
        world = self._world(4.0)
        # pedestrian behind the robot: outside the forward FOV
        t = aux_ground_truth(world, np.array([[3.0, 2.0]]), PED_R,
                             np.array([5.0, 2.0]), ROBOT_R, 0.0, SensingConfig())
        assert t.nearest_human == 1.0

    def test_pedestrian_surface_distance(self):
        world = self._world(4.0)
        d = 1.0
        ped = np.array([[5.0 + ROBOT_R + d + PED_R, 2.0]])
        t = aux_ground_truth(world, ped, PED_R, np.array([5.0, 2.0]), ROBOT_R,
                             0.0, SensingConfig())
        assert t.nearest_human == pytest.approx(d / 5.0, abs=1e-9)

    def test_as_array_layout(self):
        t = AuxTargets(wall_left=0.1, wall_right=0.2, nearest_human=0.3)
        assert np.array_equal(t.as_array(), [0.1, 0.2, 0.3])


class TestWrapAngle:
    def test_wrap_basics(self):
        assert wrap_angle(0.0) == 0.0
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)
        assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
        for a in np.linspace(-10, 10, 101):
            w = wrap_angle(a)
            assert -math.pi < w <= math.pi
            assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-12)
            assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-12)
