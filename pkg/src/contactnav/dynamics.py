"""2D compliant-contact physics for one robot disc and a pedestrian crowd.

One control period (0.1 s) integrates 40 semi-implicit Euler substeps of
2.5 ms: 100 Hz physics with 4 substeps.  Contacts between discs follow a
linear spring-damper law with the compliance on the pedestrian side; walls
use a much stiffer spring plus a projection fallback so they are effectively
impenetrable.

The force-ratio currency used by rewards, termination, and the observation
is the peak instantaneous robot-pedestrian contact force divided by the
130 N blunt-impact pain threshold.  Wall contacts are fully simulated and
reported in the contact list but carry no pain-threshold semantics: the
threshold is about contact with humans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .config import DynamicsConfig
from .errors import ConfigurationError, SimulationDivergedError

WALL_ID = -1


@dataclass
class BodyState:
    """Externally visible state of one disc body."""

    position: np.ndarray  # (2,) m
    velocity: np.ndarray  # (2,) m/s
    radius: float
    mass: float
    camera_heading: float = 0.0  # robot only, wrapped to (-pi, pi]
    camera_yaw_rate: float = 0.0


@dataclass(frozen=True)
class Contact:
    """Peak-force record for one contacting pair within a control period."""

    body_a: int
    body_b: int  # WALL_ID for walls
    point: tuple[float, float]
    normal: tuple[float, float]  # unit, points from body_b toward body_a
    force: float  # N, peak instantaneous magnitude over the period
    force_ratio: float  # force / threshold (informational for wall contacts)


@dataclass(frozen=True)
class StepTiming:
    control_dt: float = 0.1
    physics_dt: float = 0.01
    substeps: int = 4

    @property
    def substep_dt(self) -> float:
        return self.physics_dt / self.substeps

    @property
    def substeps_per_control(self) -> int:
        return round(self.control_dt / self.substep_dt)


@dataclass
class StepResult:
    contacts: list[Contact]
    max_force_ratio: float  # robot-pedestrian contacts only
    robot_contact_impulse: np.ndarray  # (2,) N*s, robot-pedestrian only


def contact_force(overlap: float, overlap_rate: float, stiffness: float, damping: float) -> float:
    """Spring-damper contact magnitude max(0, k*overlap + c*overlap_rate)."""
    if stiffness < 0.0 or damping < 0.0:
        raise ConfigurationError("contact stiffness and damping must be nonnegative")
    return max(0.0, stiffness * overlap + damping * overlap_rate)


def detect_contacts(bodies: list[BodyState], walls: np.ndarray):
    """All penetrating disc-disc and disc-wall pairs (strict inequality).

    Returns tuples ``(index_a, index_b_or_WALL_ID, overlap, overlap_rate,
    normal)`` with the normal pointing from b toward a.
    """
    out = []
    for i, a in enumerate(bodies):
        for j in range(i + 1, len(bodies)):
            b = bodies[j]
            delta = a.position - b.position
            dist = float(np.linalg.norm(delta))
            rsum = a.radius + b.radius
            if dist >= rsum:
                continue
            normal = delta / dist if dist > 0.0 else np.array([1.0, 0.0])
            rate = -float(np.dot(a.velocity - b.velocity, normal))
            out.append((i, j, rsum - dist, rate, normal))
        for w in np.asarray(walls, dtype=np.float64).reshape(-1, 4):
            q = _closest_on_segment(a.position, w)
            delta = a.position - q
            dist = float(np.linalg.norm(delta))
            if dist >= a.radius:
                continue
            normal = delta / dist if dist > 0.0 else np.array([1.0, 0.0])
            rate = -float(np.dot(a.velocity, normal))
            out.append((i, WALL_ID, a.radius - dist, rate, normal))
    return out


def _closest_on_segment(p, w):
    a = np.array([w[0], w[1]])
    e = np.array([w[2] - w[0], w[3] - w[1]])
    ee = float(np.dot(e, e))
    if ee == 0.0:
        return a
    t = float(np.clip(np.dot(p - a, e) / ee, 0.0, 1.0))
    return a + t * e


class PhysicsEngine:
    """Owns the mutable body arrays for one environment instance.

    Body 0 is the robot; bodies 1..N are pedestrians.  Engines are single
    threaded and never shared between environments.
    """

    def __init__(
        self,
        cfg: DynamicsConfig,
        robot_start: np.ndarray,
        camera_heading: float,
        walls: np.ndarray,
        ped_positions: np.ndarray,
        ped_speed_caps: np.ndarray,
        timing: StepTiming | None = None,
    ):
        if cfg.pedestrian_stiffness < 0 or cfg.pedestrian_damping < 0:
            raise ConfigurationError("pedestrian contact parameters must be nonnegative")
        if cfg.wall_stiffness < 0 or cfg.wall_damping < 0:
            raise ConfigurationError("wall contact parameters must be nonnegative")
        self.cfg = cfg
        self.timing = timing or StepTiming(cfg.control_dt, cfg.physics_dt, cfg.substeps)
        n_ped = len(ped_positions)
        B = n_ped + 1
        self.pos = np.empty((B, 2), dtype=np.float64)
        self.pos[0] = robot_start
        if n_ped:
            self.pos[1:] = ped_positions
        self.vel = np.zeros((B, 2), dtype=np.float64)
        self.radius = np.full(B, cfg.pedestrian_radius, dtype=np.float64)
        self.radius[0] = cfg.robot_radius
        self.mass = np.full(B, cfg.pedestrian_mass, dtype=np.float64)
        self.mass[0] = cfg.robot_mass
        self.speed_cap = np.empty(B, dtype=np.float64)
        self.speed_cap[0] = 2.0 * cfg.v_max  # hard safety clamp
        if n_ped:
            self.speed_cap[1:] = ped_speed_caps
        self.cam_state = np.array([camera_heading, 0.0], dtype=np.float64)
        self.walls = np.ascontiguousarray(walls, dtype=np.float64).reshape(-1, 4)
        W = self.walls.shape[0]
        self._dd_max = np.zeros((B, B))
        self._dd_normal = np.zeros((B, B, 2))
        self._dd_point = np.zeros((B, B, 2))
        self._dw_max = np.zeros((B, W))
        self._dw_normal = np.zeros((B, W, 2))
        self._dw_point = np.zeros((B, W, 2))

    @property
    def num_bodies(self) -> int:
        return self.pos.shape[0]

    def robot_state(self) -> BodyState:
        return BodyState(
            position=self.pos[0].copy(),
            velocity=self.vel[0].copy(),
            radius=float(self.radius[0]),
            mass=float(self.mass[0]),
            camera_heading=float(self.cam_state[0]),
            camera_yaw_rate=float(self.cam_state[1]),
        )

    def step_control_period(
        self,
        command_force: np.ndarray,
        camera_torque: float,
        crowd_forces: np.ndarray | None = None,
    ) -> StepResult:
        """Advance one control period under a held command.

        Raises SimulationDivergedError if any state becomes non-finite;
        that is a framework fault, never a silently absorbed condition.
        """
        cfg = self.cfg
        B = self.num_bodies
        if crowd_forces is None:
            crowd_forces = np.zeros((B, 2))
        cmd = np.asarray(command_force, dtype=np.float64)
        if not (np.all(np.isfinite(cmd)) and math.isfinite(camera_torque)):
            raise SimulationDivergedError("non-finite command input")
        self._dd_max[:] = 0.0
        self._dw_max[:] = 0.0
        impulse = np.zeros(2)
        max_ratio, diverged = _kernels.step_period_kernel(
            self.pos, self.vel, self.radius, self.mass, self.speed_cap,
            self.cam_state,
            self.walls,
            cmd, float(camera_torque),
            np.ascontiguousarray(crowd_forces, dtype=np.float64),
            cfg.pedestrian_stiffness, cfg.pedestrian_damping,
            cfg.wall_stiffness, cfg.wall_damping,
            cfg.a_max, cfg.v_max, cfg.omega_max, cfg.robot_inertia,
            cfg.force_threshold,
            self.timing.substeps_per_control, self.timing.substep_dt,
            cfg.wall_projection_depth,
            self._dd_max, self._dd_normal, self._dd_point,
            self._dw_max, self._dw_normal, self._dw_point,
            impulse,
        )
        if diverged:
            raise SimulationDivergedError("physics produced a non-finite state")
        contacts = self._collect_contacts()
        return StepResult(
            contacts=contacts,
            max_force_ratio=float(max_ratio),
            robot_contact_impulse=impulse,
        )

    def _collect_contacts(self) -> list[Contact]:
        out = []
        thr = self.cfg.force_threshold
        ii, jj = np.nonzero(self._dd_max)
        for i, j in zip(ii.tolist(), jj.tolist()):
            f = float(self._dd_max[i, j])
            out.append(Contact(
                body_a=i, body_b=j,
                point=(float(self._dd_point[i, j, 0]), float(self._dd_point[i, j, 1])),
                normal=(float(self._dd_normal[i, j, 0]), float(self._dd_normal[i, j, 1])),
                force=f, force_ratio=f / thr,
            ))
        ii, ww = np.nonzero(self._dw_max)
        for i, w in zip(ii.tolist(), ww.tolist()):
            f = float(self._dw_max[i, w])
            out.append(Contact(
                body_a=i, body_b=WALL_ID,
                point=(float(self._dw_point[i, w, 0]), float(self._dw_point[i, w, 1])),
                normal=(float(self._dw_normal[i, w, 0]), float(self._dw_normal[i, w, 1])),
                force=f, force_ratio=f / thr,
            ))
        return out
