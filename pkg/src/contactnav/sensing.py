"""Observation construction: planar depth scans, state features, aux targets.

The depth sensor is a 64-ray planar scan spanning an 87-degree field of view
centred on the camera heading.  Ranges are measured from the robot surface
and normalized by the maximum range.  Anything closer than the minimum range
produces no return and reads as the maximum value, reproducing the
short-range blindness of a real depth camera; the trained policy has to cope
with obstacles vanishing as they get close.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .config import SensingConfig
from .errors import ContractViolationError
from .world import CorridorWorld, GlobalPath


@dataclass(frozen=True)
class DepthScan:
    ranges: np.ndarray  # (R,) normalized [0, 1]
    heading: float  # camera heading the scan was taken at


@dataclass(frozen=True)
class Observation:
    scans: np.ndarray  # (K, R) history, oldest first
    state: np.ndarray  # (14,) state + contact features

    STATE_DIM = 14


@dataclass(frozen=True)
class AuxTargets:
    """Ground truth for the auxiliary heads, normalized to [0, 1]."""

    wall_left: float
    wall_right: float
    nearest_human: float

    def as_array(self) -> np.ndarray:
        return np.array([self.wall_left, self.wall_right, self.nearest_human])


_BEARING_CACHE: dict[tuple[int, float], np.ndarray] = {}


def _base_bearings(cfg: SensingConfig) -> np.ndarray:
    key = (cfg.num_rays, cfg.fov)
    hit = _BEARING_CACHE.get(key)
    if hit is None:
        i = np.arange(cfg.num_rays, dtype=np.float64)
        hit = -cfg.fov / 2.0 + i * cfg.fov / (cfg.num_rays - 1)
        hit.setflags(write=False)
        _BEARING_CACHE[key] = hit
    return hit


def ray_bearings(camera_heading: float, cfg: SensingConfig) -> np.ndarray:
    return camera_heading + _base_bearings(cfg)


def raycast_scan(
    walls: np.ndarray,
    ped_positions: np.ndarray,
    ped_radius: float,
    robot_position: np.ndarray,
    robot_radius: float,
    camera_heading: float,
    cfg: SensingConfig,
    noise_rng: np.random.Generator | None = None,
    ped_radii: np.ndarray | None = None,
) -> DepthScan:
    """Cast the scan fan and apply normalization and the blind zone."""
    bearings = ray_bearings(camera_heading, cfg)
    hits = np.empty(cfg.num_rays, dtype=np.float64)
    ped_positions = np.ascontiguousarray(ped_positions, dtype=np.float64).reshape(-1, 2)
    if ped_radii is None:
        ped_radii = np.full(len(ped_positions), ped_radius)
    _kernels.raycast_kernel(
        np.ascontiguousarray(robot_position, dtype=np.float64),
        bearings,
        np.ascontiguousarray(walls, dtype=np.float64).reshape(-1, 4),
        ped_positions,
        ped_radii,
        cfg.max_range + robot_radius,
        hits,
    )
    surface = hits - robot_radius
    if noise_rng is not None and cfg.range_noise_std > 0.0:
        surface = surface + noise_rng.normal(0.0, cfg.range_noise_std, size=surface.shape)
    values = np.clip(surface, 0.0, cfg.max_range) / cfg.max_range
    if cfg.blind_zone_enabled:
        values = np.where(surface < cfg.min_range, 1.0, values)
    return DepthScan(ranges=values, heading=camera_heading)


class ScanHistory:
    """Fixed-length scan buffer; seeded with K copies of the first scan."""

    def __init__(self, first: DepthScan, length: int):
        self.length = length
        self._buf = [first] * length

    def push(self, scan: DepthScan) -> None:
        self._buf = self._buf[1:] + [scan]

    def stacked(self) -> np.ndarray:
        return np.stack([s.ranges for s in self._buf])


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def build_observation(
    history: ScanHistory,
    robot_position: np.ndarray,
    robot_velocity: np.ndarray,
    camera_heading: float,
    path: GlobalPath,
    progress: float,
    prev_action: np.ndarray,
    max_force_ratio: float,
    contact_impulse: np.ndarray,
    v_max: float,
    lookahead: float,
) -> Observation:
    """Assemble the policy observation; all features land in [-1, 1]."""
    if path.waypoints.shape[0] == 0:
        raise ContractViolationError("build_observation requires a non-empty path")
    c = math.cos(camera_heading)
    s = math.sin(camera_heading)
    vx, vy = float(robot_velocity[0]), float(robot_velocity[1])
    v_body = (
        (c * vx + s * vy) / v_max,
        (-s * vx + c * vy) / v_max,
    )

    wp = path.active_waypoint(progress, lookahead)
    to_wp = wp - robot_position
    dist_wp = float(np.linalg.norm(to_wp))
    if dist_wp > 0.0:
        err = wrap_angle(math.atan2(to_wp[1], to_wp[0]) - camera_heading)
    else:
        err = 0.0

    if path.arc_length > 0.0:
        remaining = (path.arc_length - progress) / path.arc_length
    else:
        remaining = 0.0

    imp = float(np.linalg.norm(contact_impulse))
    if imp > 0.0:
        bearing = math.atan2(contact_impulse[1], contact_impulse[0]) - camera_heading
        contact_dir = (math.sin(bearing), math.cos(bearing))
    else:
        contact_dir = (0.0, 0.0)

    state = np.array([
        _clip1(v_body[0]),
        _clip1(v_body[1]),
        math.sin(camera_heading),
        math.cos(camera_heading),
        math.sin(err),
        math.cos(err),
        min(dist_wp, 5.0) / 5.0,
        min(max(remaining, 0.0), 1.0),
        prev_action[0] / v_max,
        prev_action[1] / math.pi,
        prev_action[2] / math.pi,
        min(max_force_ratio, 1.0),
        contact_dir[0],
        contact_dir[1],
    ])
    return Observation(scans=history.stacked(), state=state)


def _clip1(v: float) -> float:
    return min(max(v, -1.0), 1.0)


def aux_ground_truth(
    world: CorridorWorld,
    ped_positions: np.ndarray,
    ped_radius: float,
    robot_position: np.ndarray,
    robot_radius: float,
    camera_heading: float,
    cfg: SensingConfig,
) -> AuxTargets:
    """Ground-truth targets for the auxiliary distance heads.

    Wall distances are measured from the robot surface perpendicular to the
    corridor axis (the corridor runs along +x, so left is +y).  The nearest
    human counts only pedestrians whose centre bearing falls inside the
    camera field of view; with none in view the target saturates at 1.
    """
    out = np.empty(2)
    _kernels.raycast_kernel(
        np.ascontiguousarray(robot_position, dtype=np.float64),
        np.array([math.pi / 2.0, -math.pi / 2.0]),
        np.ascontiguousarray(world.walls, dtype=np.float64),
        np.zeros((0, 2)),
        np.zeros(0),
        cfg.max_range + robot_radius,
        out,
    )
    wall_left = min(max(out[0] - robot_radius, 0.0), cfg.max_range)
    wall_right = min(max(out[1] - robot_radius, 0.0), cfg.max_range)

    nearest = cfg.max_range
    for p in np.asarray(ped_positions, dtype=np.float64).reshape(-1, 2):
        delta = p - robot_position
        bearing = wrap_angle(math.atan2(delta[1], delta[0]) - camera_heading)
        if abs(bearing) > cfg.fov / 2.0:
            continue
        d = float(np.linalg.norm(delta)) - robot_radius - ped_radius
        nearest = min(nearest, max(d, 0.0))
    return AuxTargets(
        wall_left=wall_left / cfg.max_range,
        wall_right=wall_right / cfg.max_range,
        nearest_human=nearest / cfg.max_range,
    )
