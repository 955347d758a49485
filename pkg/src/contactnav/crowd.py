"""Pedestrian crowds: density-based spawning and social-force behaviour.

Walkers follow the classic social-force form: a relaxation term pulling the
velocity toward the preferred speed along the goal direction, plus
exponential repulsion from other pedestrians, the robot (configurable), and
walls.  Standers keep only the relaxation-to-rest term; a standing person in
a packed crowd holds position rather than diffusing away, and this is what
makes them genuine obstacles the robot may have to touch.  Walkers that
reach their corridor end re-target the opposite end, keeping density
constant over an episode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .config import CrowdConfig, DynamicsConfig
from .errors import SpawnError
from .world import CorridorWorld

WALKER = 0
STANDER = 1


@dataclass
class Pedestrian:
    position: np.ndarray  # (2,)
    mode: int  # WALKER or STANDER
    goal: np.ndarray  # (2,), meaningful for walkers
    preferred_speed: float  # 0 for standers
    spawn: np.ndarray  # (2,) original placement


class Crowd:
    """Array-of-struct view over the pedestrians of one environment."""

    def __init__(self, pedestrians: list[Pedestrian], cfg: CrowdConfig, dyn: DynamicsConfig):
        self.cfg = cfg
        self.dyn = dyn
        n = len(pedestrians)
        self.positions = np.array([p.position for p in pedestrians]).reshape(n, 2)
        self.goals = np.array([p.goal for p in pedestrians]).reshape(n, 2)
        self.spawns = np.array([p.spawn for p in pedestrians]).reshape(n, 2)
        self.preferred_speed = np.array([p.preferred_speed for p in pedestrians])
        self.is_walker = np.array([p.mode == WALKER for p in pedestrians])
        self.speed_caps = np.where(
            self.is_walker,
            cfg.walker_speed_cap_factor * self.preferred_speed,
            cfg.stander_speed_cap,
        )
        self._masses = np.full(n, dyn.pedestrian_mass)
        self._radii = np.full(n, dyn.pedestrian_radius)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def behaviour_forces(self, positions, velocities, robot_pos, walls) -> np.ndarray:
        """Social forces for all pedestrians, computed in fixed index order."""
        n = positions.shape[0]
        out = np.zeros((n, 2))
        if n:
            _kernels.social_force_kernel(
                positions, velocities, self.preferred_speed, self.goals,
                self.is_walker,
                self._masses,
                self._radii,
                self.cfg.relaxation_time,
                self.cfg.repulsion_strength, self.cfg.repulsion_range,
                robot_pos, self.dyn.robot_radius, self.cfg.robot_repulsion,
                walls, out,
            )
        return out

    def retarget_walkers(self, positions, length: float, margin: float) -> None:
        """Walkers within 0.3 m of their goal turn back toward the other end."""
        delta = positions - self.goals
        close = (delta[:, 0] ** 2 + delta[:, 1] ** 2 < 0.09) & self.is_walker
        for i in np.nonzero(close)[0]:
            x_goal = margin if self.goals[i, 0] > length / 2 else length - margin
            self.goals[i] = (x_goal, positions[i, 1])


def pedestrian_count(density: float, free_area: float) -> int:
    return int(round(density * free_area))


def spawn_crowd(
    world: CorridorWorld,
    cfg: CrowdConfig,
    dyn: DynamicsConfig,
    seed: int,
) -> list[Pedestrian]:
    """Place round(density * free_area) non-overlapping pedestrians.

    Deterministic in the seed.  Raises SpawnError when a pedestrian cannot
    be placed after cfg.max_spawn_attempts rejection samples; the caller is
    expected to retry with a fresh seed and count the incident.
    """
    n = pedestrian_count(cfg.density, world.free_area)
    rng = np.random.default_rng(seed)
    r = dyn.pedestrian_radius
    placed: list[np.ndarray] = []
    walls = world.walls
    for _ in range(n):
        ok = False
        for _attempt in range(cfg.max_spawn_attempts):
            p = np.array([
                rng.uniform(r, world.length - r),
                rng.uniform(r, world.width - r),
            ])
            if _dist_to_walls(p, walls) < r:
                continue
            if np.linalg.norm(p - world.start_xy) < r + dyn.robot_radius:
                continue
            if any(np.linalg.norm(p - q) < 2 * r for q in placed):
                continue
            placed.append(p)
            ok = True
            break
        if not ok:
            raise SpawnError(
                f"could not place pedestrian {len(placed) + 1}/{n} "
                f"after {cfg.max_spawn_attempts} attempts (seed {seed})"
            )

    n_walkers = int(round(n * cfg.walker_fraction))
    margin = r + 0.2
    peds = []
    for i, p in enumerate(placed):
        if i < n_walkers:
            v0 = float(rng.uniform(*cfg.walker_speed_range))
            x_goal = world.length - margin if rng.integers(0, 2) else margin
            peds.append(Pedestrian(
                position=p, mode=WALKER,
                goal=np.array([x_goal, p[1]]),
                preferred_speed=v0, spawn=p.copy(),
            ))
        else:
            peds.append(Pedestrian(
                position=p, mode=STANDER,
                goal=p.copy(), preferred_speed=0.0, spawn=p.copy(),
            ))
    return peds


def _dist_to_walls(p, walls) -> float:
    best = np.inf
    for x1, y1, x2, y2 in walls:
        ex, ey = x2 - x1, y2 - y1
        ee = ex * ex + ey * ey
        if ee == 0.0:
            qx, qy = x1, y1
        else:
            t = min(max(((p[0] - x1) * ex + (p[1] - y1) * ey) / ee, 0.0), 1.0)
            qx, qy = x1 + t * ex, y1 + t * ey
        d = np.hypot(p[0] - qx, p[1] - qy)
        if d < best:
            best = d
    return float(best)


def social_force(
    ped: Pedestrian,
    neighbours: list[tuple[np.ndarray, float]],
    walls: np.ndarray,
    robot: tuple[np.ndarray, float] | None,
    velocity: np.ndarray,
    cfg: CrowdConfig,
    dyn: DynamicsConfig,
) -> np.ndarray:
    """Reference single-pedestrian social force (documented formula).

    `neighbours` and `robot` are (position, radius) pairs.  The vectorized
    batch path in Crowd.behaviour_forces computes the same quantity; the two
    agree to floating-point roundoff and are cross-checked in the tests.
    """
    m = dyn.pedestrian_mass
    tau = cfg.relaxation_time
    if ped.mode == WALKER:
        to_goal = ped.goal - ped.position
        norm = np.linalg.norm(to_goal)
        e = to_goal / norm if norm > 0 else np.zeros(2)
        force = m * (ped.preferred_speed * e - velocity) / tau
        others = list(neighbours)
        if robot is not None and cfg.robot_repulsion:
            others.append(robot)
        for q, rad in others:
            delta = ped.position - q
            d = np.linalg.norm(delta)
            n = delta / d if d > 0 else np.array([1.0, 0.0])
            force = force + cfg.repulsion_strength * np.exp(
                (dyn.pedestrian_radius + rad - d) / cfg.repulsion_range
            ) * n
        for w in np.asarray(walls, dtype=np.float64).reshape(-1, 4):
            q = _closest_point(ped.position, w)
            delta = ped.position - q
            d = np.linalg.norm(delta)
            n = delta / d if d > 0 else np.array([1.0, 0.0])
            force = force + cfg.repulsion_strength * np.exp(
                (dyn.pedestrian_radius - d) / cfg.repulsion_range
            ) * n
        return force
    return m * (0.0 - velocity) / tau


def _closest_point(p, w):
    ex, ey = w[2] - w[0], w[3] - w[1]
    ee = ex * ex + ey * ey
    if ee == 0.0:
        return np.array([w[0], w[1]])
    t = float(np.clip(((p[0] - w[0]) * ex + (p[1] - w[1]) * ey) / ee, 0.0, 1.0))
    return np.array([w[0] + t * ex, w[1] + t * ey])
