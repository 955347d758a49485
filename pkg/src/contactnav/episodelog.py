"""JSON-lines episode logs and exact replay checking.

A log is one header line followed by one record per control step and a
final outcome line.  Floats are serialized with Python's shortest
round-trip repr, so parsing a log recovers bit-identical values and replay
comparison can use plain equality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig
from .errors import ConfigurationError, ReplayDivergenceError

LOG_VERSION = 1

# step fields compared during replay, in reporting order
_COMPARED = ("t", "x", "y", "cam", "vx", "vy", "speed", "heading", "cam_set",
             "reward", "ratio", "progress")


class EpisodeLogWriter:
    """Streams one episode to a JSON-lines file (or collects lines)."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.lines: list[str] = []

    def _emit(self, doc: dict) -> None:
        self.lines.append(json.dumps(doc))

    def header(self, env, policy) -> None:
        self._emit({
            "type": "episode_log",
            "version": LOG_VERSION,
            "config_digest": env.cfg.config_digest(),
            "simulation_digest": env.cfg.simulation_digest(),
            "interface_digest": env.cfg.interface_digest(),
            "world_seed": env.header.world_seed,
            "crowd_seed": env.header.crowd_seed,
            "density": env.header.density,
            "spawn_retries": env.header.spawn_retries,
            "control_dt": env.cfg.dynamics.control_dt,
            "policy": policy.describe(),
        })

    def step(self, env, action, out) -> None:
        x, y, cam = env.robot_pose()
        self._emit({
            "step": env.t,
            "t": env.t * env.cfg.dynamics.control_dt,
            "x": x, "y": y, "cam": cam,
            "vx": float(env.engine.vel[0, 0]), "vy": float(env.engine.vel[0, 1]),
            "speed": action.speed, "heading": action.motion_heading,
            "cam_set": action.camera_heading,
            "reward": out.reward,
            "terms": {
                "progress": out.terms.progress, "force": out.terms.force,
                "action_rate": out.terms.action_rate, "terminal": out.terms.terminal,
            },
            "ratio": out.max_force_ratio,
            "progress": out.progress,
            "n_contacts": out.n_contacts,
        })

    def outcome(self, outcome) -> None:
        self._emit({
            "type": "outcome",
            "kind": outcome.kind,
            "time_to_completion": outcome.time_to_completion,
            "max_force": outcome.max_force,
            "density": outcome.density,
            "seed": outcome.seed,
        })

    def close(self) -> None:
        if self.path is not None:
            self.path.write_text("\n".join(self.lines) + "\n")


@dataclass
class EpisodeLog:
    header: dict
    steps: list[dict]
    outcome: dict | None

    @staticmethod
    def load(path: str | Path) -> "EpisodeLog":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        if not lines:
            raise ConfigurationError(f"episode log {path} is empty")
        header = json.loads(lines[0])
        if header.get("type") != "episode_log":
            raise ConfigurationError(f"{path} does not start with an episode_log header")
        if header.get("version") != LOG_VERSION:
            raise ConfigurationError(f"unsupported episode log version {header.get('version')}")
        steps = []
        outcome = None
        for ln in lines[1:]:
            doc = json.loads(ln)
            if doc.get("type") == "outcome":
                outcome = doc
            else:
                steps.append(doc)
        return EpisodeLog(header=header, steps=steps, outcome=outcome)


def replay_episode(log: EpisodeLog, cfg: RunConfig, policy) -> None:
    """Re-simulate the logged episode and compare step records exactly.

    Raises ReplayDivergenceError at the first differing field.  The policy
    must be the one named in the log header (checked by the CLI through the
    parameter digest).
    """
    from .evaluation import run_episode  # local import avoids a cycle

    if log.header["simulation_digest"] != cfg.simulation_digest():
        raise ConfigurationError(
            f"log was recorded under simulation digest "
            f"{log.header['simulation_digest']}, the active config gives "
            f"{cfg.simulation_digest()}"
        )
    writer = EpisodeLogWriter(None)
    run_episode(policy, cfg, log.header["world_seed"], log.header["density"],
                log_writer=writer)
    fresh_steps = [json.loads(ln) for ln in writer.lines[1:]]
    fresh_steps = [d for d in fresh_steps if d.get("type") != "outcome"]
    n = min(len(log.steps), len(fresh_steps))
    for i in range(n):
        logged = log.steps[i]
        fresh = fresh_steps[i]
        for key in _COMPARED:
            if logged.get(key) != fresh.get(key):
                raise ReplayDivergenceError(i, key, logged.get(key), fresh.get(key))
        if logged.get("terms") != fresh.get("terms"):
            raise ReplayDivergenceError(i, "terms", logged.get("terms"), fresh.get("terms"))
    if len(log.steps) != len(fresh_steps):
        raise ReplayDivergenceError(
            n, "length", len(log.steps), len(fresh_steps)
        )
