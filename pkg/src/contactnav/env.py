"""One corridor episode: world, crowd, physics, sensing, and control glue.

An environment owns its physics engine exclusively and derives every random
stream it needs from (master seed, env index, episode index), so episodes
replay exactly from those three integers plus the config.  Worker processes
may hold any subset of environments without changing any trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .control import Action, desired_velocity, pd_command
from .crowd import Crowd, spawn_crowd
from .dynamics import PhysicsEngine, StepTiming
from .errors import SpawnError
from .sensing import ScanHistory, build_observation, raycast_scan, aux_ground_truth, Observation
from .training import check_termination, compute_reward, RewardTerms
from .world import generate_corridor, rasterize, plan_global

STREAM_WORLD = 0
STREAM_CROWD = 1
STREAM_SAMPLING = 2
STREAM_NOISE = 3


@dataclass
class StepOutcome:
    reward: float
    terms: RewardTerms
    done: bool
    termination: str | None
    max_force_ratio: float
    n_contacts: int
    progress: float


@dataclass
class EpisodeHeader:
    world_seed: int
    crowd_seed: int
    density: float
    spawn_retries: int = 0
    extra: dict = field(default_factory=dict)


class CorridorEnv:
    """Gym-style environment over one procedurally generated corridor."""

    def __init__(self, cfg: RunConfig, env_index: int = 0, density: float | None = None):
        self.cfg = cfg
        self.env_index = env_index
        self.density = cfg.training.density if density is None else density
        self.episode_index = -1
        self.timing = StepTiming(
            cfg.dynamics.control_dt, cfg.dynamics.physics_dt, cfg.dynamics.substeps
        )
        self.engine: PhysicsEngine | None = None

    # -- seeding ----------------------------------------------------------

    def _stream(self, episode: int, kind: int) -> np.random.Generator:
        ss = np.random.SeedSequence(
            [self.cfg.master_seed, self.env_index, episode, kind]
        )
        return np.random.default_rng(ss)

    def sampling_rng(self) -> np.random.Generator:
        """Per-episode stream for policy action sampling."""
        return self._stream(self.episode_index, STREAM_SAMPLING)

    # -- episode lifecycle --------------------------------------------------

    def reset(
        self,
        world_seed: int | None = None,
        crowd_seed: int | None = None,
    ) -> Observation:
        """Start a fresh episode; explicit seeds override the derived ones."""
        self.episode_index += 1
        if world_seed is None:
            world_seed = int(self._stream(self.episode_index, STREAM_WORLD).integers(2**63))
        if crowd_seed is None:
            crowd_seed = int(self._stream(self.episode_index, STREAM_CROWD).integers(2**63))

        cfg = self.cfg
        self.world = generate_corridor(world_seed, cfg.world)
        grid = rasterize(self.world, cfg.world.grid_resolution, pad=cfg.dynamics.robot_radius)
        self.path = plan_global(
            grid, self.world.start_xy, self.world.goal_xy,
            cfg.dynamics.robot_radius, cfg.world.waypoint_spacing,
        )

        crowd_cfg = cfg.crowd
        spawn_retries = 0
        seed = crowd_seed
        density_cfg = crowd_cfg if crowd_cfg.density == self.density else None
        if density_cfg is None:
            import dataclasses
            crowd_cfg = dataclasses.replace(crowd_cfg, density=self.density)
        while True:
            try:
                peds = spawn_crowd(self.world, crowd_cfg, cfg.dynamics, seed)
                break
            except SpawnError:
                spawn_retries += 1
                if spawn_retries > 16:
                    raise
                seed = seed + 1
        self.crowd = Crowd(peds, crowd_cfg, cfg.dynamics)

        self.engine = PhysicsEngine(
            cfg.dynamics,
            robot_start=self.world.start_xy,
            camera_heading=self.world.start_camera_heading,
            walls=self.world.walls,
            ped_positions=self.crowd.positions,
            ped_speed_caps=self.crowd.speed_caps,
            timing=self.timing,
        )
        self.header = EpisodeHeader(
            world_seed=world_seed, crowd_seed=crowd_seed,
            density=self.density, spawn_retries=spawn_retries,
        )
        self._noise_rng = (
            self._stream(self.episode_index, STREAM_NOISE)
            if cfg.sensing.range_noise_std > 0.0 else None
        )
        self.t = 0
        self.progress = self.path.project(self.engine.pos[0], 0.0)
        self.prev_action = np.zeros(3)
        self.last_ratio = 0.0
        self.last_impulse = np.zeros(2)
        self.history = ScanHistory(self._scan(), cfg.sensing.history_length)
        return self.observe()

    def _scan(self):
        e = self.engine
        return raycast_scan(
            self.world.walls, e.pos[1:], self.cfg.dynamics.pedestrian_radius,
            e.pos[0], self.cfg.dynamics.robot_radius, float(e.cam_state[0]),
            self.cfg.sensing, self._noise_rng, ped_radii=e.radius[1:],
        )

    def observe(self) -> Observation:
        e = self.engine
        return build_observation(
            self.history, e.pos[0], e.vel[0], float(e.cam_state[0]),
            self.path, self.progress, self.prev_action,
            self.last_ratio, self.last_impulse,
            self.cfg.dynamics.v_max, self.cfg.sensing.waypoint_lookahead,
        )

    def aux_target(self) -> np.ndarray:
        e = self.engine
        return aux_ground_truth(
            self.world, e.pos[1:], self.cfg.dynamics.pedestrian_radius,
            e.pos[0], self.cfg.dynamics.robot_radius, float(e.cam_state[0]),
            self.cfg.sensing,
        ).as_array()

    def step(self, action: Action) -> StepOutcome:
        cfg = self.cfg
        e = self.engine
        setpoint = desired_velocity(action)
        force, torque = pd_command(
            e.vel[0], float(e.cam_state[0]), float(e.cam_state[1]),
            cfg.dynamics.robot_mass, cfg.dynamics.robot_inertia,
            setpoint, action.camera_heading, cfg.control,
        )
        n_ped = len(self.crowd)
        crowd_forces = np.zeros((n_ped + 1, 2))
        if n_ped:
            crowd_forces[1:] = self.crowd.behaviour_forces(
                e.pos[1:], e.vel[1:], e.pos[0], e.walls
            )
        result = e.step_control_period(force, torque, crowd_forces)
        if n_ped:
            self.crowd.retarget_walkers(
                e.pos[1:], self.world.length,
                cfg.dynamics.pedestrian_radius + 0.2,
            )

        self.t += 1
        prev_progress = self.progress
        self.progress = self.path.project(e.pos[0], prev_progress)
        termination = check_termination(
            e.pos[0], self.world.goal_xy, result.max_force_ratio, self.t, cfg.training
        )
        act_arr = action.as_array()
        terms = compute_reward(
            prev_progress, self.progress, result.max_force_ratio,
            act_arr, self.prev_action, termination,
            cfg.training.reward, cfg.dynamics.v_max,
        )
        self.prev_action = act_arr
        self.last_ratio = result.max_force_ratio
        self.last_impulse = result.robot_contact_impulse
        self.history.push(self._scan())
        return StepOutcome(
            reward=terms.total,
            terms=terms,
            done=termination is not None,
            termination=termination,
            max_force_ratio=result.max_force_ratio,
            n_contacts=len(result.contacts),
            progress=self.progress,
        )

    # full kinematic state, used by scripted policies and logs
    def robot_pose(self) -> tuple[float, float, float]:
        e = self.engine
        return float(e.pos[0, 0]), float(e.pos[0, 1]), float(e.cam_state[0])

    def robot_speed(self) -> float:
        return float(np.linalg.norm(self.engine.vel[0]))
