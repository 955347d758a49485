"""Density-sweep evaluation and the bucketed success/time report.

An episode ends reached, force_violation, safe_stop, or unsafe_timeout.
Safe stop operationalizes the blocked-crowd rule: the episode timed out
with no violation and the robot was at rest (mean speed below a threshold
over the final window).  Success counts reached and safe_stop.  Completion
time statistics cover reached episodes only; safe stops are reported
separately so stricter readings can be applied downstream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import policy as policy_mod
from .config import RunConfig
from .control import Action
from .env import CorridorEnv
from .errors import ChecksumMismatchError, ConfigurationError
from .trainer import act_single

REACHED = "reached"
SAFE_STOP = "safe_stop"
FORCE_VIOLATION = "force_violation"
UNSAFE_TIMEOUT = "unsafe_timeout"

BUCKETS = ("<1.0", "=1.0", ">1.0")


@dataclass(frozen=True)
class EpisodeOutcome:
    kind: str
    time_to_completion: float | None  # s, reached episodes only
    max_force: float  # N, peak robot-pedestrian contact force
    density: float
    seed: int

    @property
    def success(self) -> bool:
        return self.kind in (REACHED, SAFE_STOP)


@dataclass
class BucketStats:
    n: int
    success_rate: float  # percent
    time_mean: float | None
    time_std: float | None  # population std, matching the report's value (sigma) format
    n_reached: int
    n_safe_stop: int


@dataclass
class EvalReport:
    buckets: dict[str, BucketStats]
    outcomes: list[EpisodeOutcome] = field(default_factory=list)
    config_digest: str = ""
    interface_digest: str = ""
    note: str = "completion time statistics cover reached episodes only"

    def to_json(self) -> str:
        return json.dumps({
            "type": "eval_report",
            "config_digest": self.config_digest,
            "interface_digest": self.interface_digest,
            "note": self.note,
            "buckets": {
                k: {
                    "n": b.n, "success_rate": b.success_rate,
                    "time_mean": b.time_mean, "time_std": b.time_std,
                    "n_reached": b.n_reached, "n_safe_stop": b.n_safe_stop,
                } for k, b in self.buckets.items()
            },
            "outcomes": [
                {
                    "kind": o.kind, "time_to_completion": o.time_to_completion,
                    "max_force": o.max_force, "density": o.density, "seed": o.seed,
                } for o in self.outcomes
            ],
        }, indent=2)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        doc = json.loads(text)
        if doc.get("type") != "eval_report":
            raise ConfigurationError("not an eval report document")
        buckets = {
            k: BucketStats(
                n=b["n"], success_rate=b["success_rate"],
                time_mean=b["time_mean"], time_std=b["time_std"],
                n_reached=b["n_reached"], n_safe_stop=b["n_safe_stop"],
            ) for k, b in doc["buckets"].items()
        }
        outcomes = [
            EpisodeOutcome(
                kind=o["kind"], time_to_completion=o["time_to_completion"],
                max_force=o["max_force"], density=o["density"], seed=o["seed"],
            ) for o in doc["outcomes"]
        ]
        return EvalReport(buckets=buckets, outcomes=outcomes,
                          config_digest=doc.get("config_digest", ""),
                          interface_digest=doc.get("interface_digest", ""),
                          note=doc.get("note", ""))

    def text_table(self) -> str:
        lines = [
            f"# {self.note}",
            f"{'Density':<10}{'Success':>9}  {'Time to Completion (sigma)':>28}"
            f"  {'reached/safe-stop/n':>20}",
        ]
        for k in BUCKETS:
            b = self.buckets[k]
            if b.time_mean is None:
                time_s = "--"
            else:
                time_s = f"{b.time_mean:.2f} ({b.time_std:.2f})"
            counts = f"{b.n_reached}/{b.n_safe_stop}/{b.n}"
            lines.append(f"{k:<10}{b.success_rate:>8.1f}%  {time_s:>28}  {counts:>20}")
        return "\n".join(lines) + "\n"


# -- policies -----------------------------------------------------------------


class CheckpointPolicy:
    """Trained policy wrapper; mode 'mean' or 'stochastic'."""

    def __init__(self, params: policy_mod.PolicyParams, v_max: float, mode: str = "mean"):
        if mode not in ("mean", "stochastic"):
            raise ConfigurationError(f"unknown policy mode {mode!r}")
        self.params = params
        self.v_max = v_max
        self.mode = mode

    def act(self, env: CorridorEnv, obs, rng) -> Action:
        sample_rng = rng if self.mode == "stochastic" else None
        _, _, _, action = act_single(self.params, obs, self.v_max, sample_rng)
        return action

    def describe(self) -> dict:
        return {"kind": "checkpoint", "mode": self.mode,
                "params_digest": policy_mod.params_digest(self.params)}


class ZeroPolicy:
    """Holds still: zero speed, zero headings."""

    def act(self, env: CorridorEnv, obs, rng) -> Action:
        return Action(0.0, 0.0, 0.0)

    def describe(self) -> dict:
        return {"kind": "zero"}


class StraightLinePolicy:
    """Constant full speed straight at the goal, camera on the goal."""

    def act(self, env: CorridorEnv, obs, rng) -> Action:
        x, y, _ = env.robot_pose()
        g = env.world.goal_xy
        heading = math.atan2(g[1] - y, g[0] - x)
        return Action(env.cfg.dynamics.v_max, heading, heading)

    def describe(self) -> dict:
        return {"kind": "straight_line"}


class ChargeNearestPolicy:
    """Drives at full speed into the nearest pedestrian (test harness)."""

    def act(self, env: CorridorEnv, obs, rng) -> Action:
        x, y, _ = env.robot_pose()
        peds = env.engine.pos[1:]
        if len(peds) == 0:
            return Action(env.cfg.dynamics.v_max, 0.0, 0.0)
        d = np.linalg.norm(peds - np.array([x, y]), axis=1)
        p = peds[int(np.argmin(d))]
        heading = math.atan2(p[1] - y, p[0] - x)
        return Action(env.cfg.dynamics.v_max, heading, heading)

    def describe(self) -> dict:
        return {"kind": "charge_nearest"}


def checkpoint_policy_from_file(path, cfg: RunConfig, mode: str) -> CheckpointPolicy:
    params, header, _ = policy_mod.load_checkpoint(path)
    if header["interface_digest"] != cfg.interface_digest():
        raise ChecksumMismatchError(
            f"checkpoint interface digest {header['interface_digest']} does not match "
            f"the active config ({cfg.interface_digest()}); refusing to evaluate with a "
            f"mismatched observation/action layout"
        )
    return CheckpointPolicy(params, cfg.dynamics.v_max, mode)


# -- episodes and sweeps ------------------------------------------------------


def run_episode(
    policy,
    cfg: RunConfig,
    world_seed: int,
    density: float,
    log_writer=None,
) -> EpisodeOutcome:
    """One evaluation episode, deterministic in (seed, density, policy mode)."""
    env = CorridorEnv(cfg, env_index=0, density=density)
    crowd_seed = int(np.random.default_rng(
        np.random.SeedSequence([world_seed, 1])).integers(2**63))
    env.reset(world_seed=world_seed, crowd_seed=crowd_seed)
    rng = np.random.default_rng(np.random.SeedSequence([world_seed, 2]))
    dt = cfg.dynamics.control_dt
    window = max(1, int(round(cfg.evaluation.safe_stop_window / dt)))
    speeds: list[float] = []
    max_force = 0.0
    kind = None
    time_to_completion = None
    if log_writer is not None:
        log_writer.header(env, policy)
    for t in range(cfg.training.max_episode_steps):
        obs = env.observe()
        action = policy.act(env, obs, rng)
        out = env.step(action)
        max_force = max(max_force, out.max_force_ratio * cfg.dynamics.force_threshold)
        speeds.append(env.robot_speed())
        if log_writer is not None:
            log_writer.step(env, action, out)
        if out.done:
            if out.termination == "force_violation":
                kind = FORCE_VIOLATION
            elif out.termination == "success":
                kind = REACHED
                time_to_completion = env.t * dt
            else:  # timeout
                recent = speeds[-window:]
                at_rest = float(np.mean(recent)) < cfg.evaluation.safe_stop_speed
                kind = SAFE_STOP if at_rest else UNSAFE_TIMEOUT
            break
    if kind is None:
        # max_episode_steps exhausted without the env flagging done (cannot
        # happen with a consistent config; kept as a hard guard)
        kind = UNSAFE_TIMEOUT
    outcome = EpisodeOutcome(
        kind=kind, time_to_completion=time_to_completion,
        max_force=max_force, density=density, seed=world_seed,
    )
    if log_writer is not None:
        log_writer.outcome(outcome)
    return outcome


_POOL_STATE: dict = {}


def _pool_init(cfg_dict, policy):
    from .config import config_from_dict

    _POOL_STATE["cfg"] = config_from_dict(cfg_dict)
    _POOL_STATE["policy"] = policy


def _pool_episode(task):
    seed, density = task
    return run_episode(_POOL_STATE["policy"], _POOL_STATE["cfg"], seed, density)


def run_sweep(
    policy,
    cfg: RunConfig,
    densities=None,
    trials_per_density: int | None = None,
    base_seed: int | None = None,
    progress=lambda i, n: None,
    workers: int = 1,
) -> EvalReport:
    """Seed schedule: trial i (density-major) uses world seed base + i.

    Episodes are independent; with workers > 1 they run on a process pool
    and are merged back in trial order, so the report is identical for any
    worker count.
    """
    ev = cfg.evaluation
    densities = list(ev.densities if densities is None else densities)
    trials = ev.trials_per_density if trials_per_density is None else trials_per_density
    base = ev.base_seed if base_seed is None else base_seed
    if any(d < 0.0 or d > 2.0 for d in densities):
        raise ConfigurationError("densities must lie in [0, 2]")
    if trials < 1:
        raise ConfigurationError("trials_per_density must be >= 1")
    tasks = [(base + i, d)
             for i, d in enumerate(d for d in densities for _ in range(trials))]
    if workers > 1:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        with ctx.Pool(workers, initializer=_pool_init,
                      initargs=(cfg.to_dict(), policy)) as pool:
            outcomes = pool.map(_pool_episode, tasks, chunksize=4)
    else:
        outcomes = []
        for i, (seed, d) in enumerate(tasks):
            outcomes.append(run_episode(policy, cfg, seed, d))
            progress(i + 1, len(tasks))
    return aggregate(outcomes, cfg)


def aggregate(outcomes: list[EpisodeOutcome], cfg: RunConfig | None = None) -> EvalReport:
    """Bucket outcomes by density; exact recomputation lives in the tests."""
    buckets: dict[str, BucketStats] = {}
    for name in BUCKETS:
        if name == "<1.0":
            sel = [o for o in outcomes if o.density < 1.0]
        elif name == "=1.0":
            sel = [o for o in outcomes if o.density == 1.0]
        else:
            sel = [o for o in outcomes if o.density > 1.0]
        times = [o.time_to_completion for o in sel if o.kind == REACHED]
        n = len(sel)
        succ = 100.0 * sum(o.success for o in sel) / n if n else 0.0
        buckets[name] = BucketStats(
            n=n,
            success_rate=succ,
            time_mean=float(np.mean(times)) if times else None,
            time_std=float(np.std(times)) if times else None,
            n_reached=sum(o.kind == REACHED for o in sel),
            n_safe_stop=sum(o.kind == SAFE_STOP for o in sel),
        )
    return EvalReport(
        buckets=buckets,
        outcomes=list(outcomes),
        config_digest=cfg.config_digest() if cfg else "",
        interface_digest=cfg.interface_digest() if cfg else "",
    )
