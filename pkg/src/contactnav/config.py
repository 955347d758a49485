"""Structured run configuration.

A single YAML document drives every stage (world generation, physics, crowd,
sensing, control, policy, training, evaluation).  Loading is strict: unknown
keys are rejected so a typo cannot silently fall back to a default.  Two
digests are derived from a config:

* ``config_digest``   -- hash of the full canonical document (traceability).
* ``interface_digest`` -- hash of only the fields that define the observation
  and action interface the policy was trained against (scan layout, network
  architecture, action scaling, force threshold).  Checkpoints embed both;
  evaluation refuses to run when the interface digest disagrees, which guards
  against silently feeding a policy observations with the wrong layout.
  Behavioural toggles such as the sensor blind zone are deliberately excluded
  so ablation studies on a fixed checkpoint remain possible.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigurationError

CONFIG_VERSION = 1


@dataclass
class WorldConfig:
    width_range: tuple[float, float] = (2.0, 4.0)
    length_range: tuple[float, float] = (7.0, 12.0)
    goal_distance: float = 5.0
    inset_count_range: tuple[int, int] = (0, 3)
    inset_max_depth: float = 0.5
    inset_length_range: tuple[float, float] = (0.4, 1.2)
    clearance_margin: float = 0.2
    grid_resolution: float = 0.1
    waypoint_spacing: float = 0.5


@dataclass
class CrowdConfig:
    density: float = 1.0
    walker_fraction: float = 0.5
    walker_speed_range: tuple[float, float] = (0.5, 1.5)
    repulsion_strength: float = 2000.0
    repulsion_range: float = 0.08
    relaxation_time: float = 0.5
    robot_repulsion: bool = True
    walker_speed_cap_factor: float = 1.3
    stander_speed_cap: float = 1.0
    max_spawn_attempts: int = 10000


@dataclass
class DynamicsConfig:
    control_dt: float = 0.1
    physics_dt: float = 0.01
    substeps: int = 4
    robot_radius: float = 0.3
    robot_mass: float = 30.0
    robot_inertia: float = 1.35
    v_max: float = 1.0
    a_max: float = 1.5
    omega_max: float = 2.0
    pedestrian_radius: float = 0.25
    pedestrian_mass: float = 80.0
    pedestrian_stiffness: float = 10000.0
    pedestrian_damping: float = 500.0
    wall_stiffness: float = 100000.0
    wall_damping: float = 500.0
    wall_projection_depth: float = 0.05
    force_threshold: float = 130.0


@dataclass
class SensingConfig:
    num_rays: int = 64
    fov: float = 1.518
    min_range: float = 0.25
    max_range: float = 5.0
    history_length: int = 4
    blind_zone_enabled: bool = True
    range_noise_std: float = 0.0
    waypoint_lookahead: float = 0.3


@dataclass
class ControlConfig:
    kp_v: float = 5.0
    kd_v: float = 0.0
    kp_cam: float = 40.0
    kd_cam: float = 12.0


@dataclass
class PolicyConfig:
    conv_channels: tuple[int, int] = (16, 16)
    conv_kernels: tuple[int, int] = (5, 3)
    conv_strides: tuple[int, int] = (2, 2)
    feature_dim: int = 32
    hidden_dims: tuple[int, int] = (128, 64)
    log_std_init: float = -0.5
    log_std_bounds: tuple[float, float] = (-5.0, 1.0)


@dataclass
class RewardConfig:
    progress_weight: float = 1.0
    force_weight: float = 0.2
    success_bonus: float = 5.0
    failure_penalty: float = -5.0
    action_rate_weight: float = 0.01


@dataclass
class TrainingConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    epochs: int = 4
    minibatch_size: int = 1024
    learning_rate: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    aux_coef: float = 0.5
    max_grad_norm: float = 0.5
    num_envs: int = 64
    horizon: int = 256
    total_steps: int = 3_000_000
    density: float = 1.0
    success_radius: float = 0.5
    max_episode_steps: int = 300
    checkpoint_every: int = 10
    reward: RewardConfig = field(default_factory=RewardConfig)


@dataclass
class EvaluationConfig:
    densities: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6)
    trials_per_density: int = 40
    base_seed: int = 1000
    policy_mode: str = "mean"
    safe_stop_window: float = 2.0
    safe_stop_speed: float = 0.05


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    master_seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    crowd: CrowdConfig = field(default_factory=CrowdConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    sensing: SensingConfig = field(default_factory=SensingConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def to_dict(self) -> dict:
        return _asdict_canonical(self)

    def config_digest(self) -> str:
        return _digest(self.to_dict())

    def simulation_digest(self) -> str:
        """Digest over everything that determines step-by-step episode
        evolution (world, crowd, dynamics, sensing, control, training);
        sweep-level evaluation settings are excluded so a logged episode can
        be replayed under any sweep configuration."""
        d = self.to_dict()
        sim = {k: d[k] for k in
               ("world", "crowd", "dynamics", "sensing", "control", "training")}
        return _digest(sim)

    def interface_digest(self) -> str:
        """Digest of the observation/action interface only (see module doc)."""
        d = self.to_dict()
        iface = {
            "sensing": {
                k: d["sensing"][k]
                for k in ("num_rays", "fov", "max_range", "history_length")
            },
            "policy": d["policy"],
            "v_max": d["dynamics"]["v_max"],
            "force_threshold": d["dynamics"]["force_threshold"],
        }
        return _digest(iface)


def _asdict_canonical(obj) -> dict:
    """dataclasses.asdict with tuples rendered as lists for stable JSON."""
    raw = dataclasses.asdict(obj)

    def conv(v):
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(raw)


def _digest(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


_SECTION_TYPES = {
    "world": WorldConfig,
    "crowd": CrowdConfig,
    "dynamics": DynamicsConfig,
    "sensing": SensingConfig,
    "control": ControlConfig,
    "policy": PolicyConfig,
    "training": TrainingConfig,
    "evaluation": EvaluationConfig,
}


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"section {path!r} must be a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {path!r}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        kwargs[name] = _coerce(f.type, value, f"{path}.{name}")
    return cls(**kwargs)


def _coerce(type_str, value, path: str):
    # field types arrive as strings because of `from __future__ import annotations`
    t = str(type_str)
    if t == "RewardConfig":
        return _build_dataclass(RewardConfig, value, path)
    if t.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path!r} must be a sequence")
        inner = float if "float" in t else int
        return tuple(_coerce_scalar(inner, v, path) for v in value)
    if t == "float":
        return _coerce_scalar(float, value, path)
    if t == "int":
        return _coerce_scalar(int, value, path)
    if t == "bool":
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path!r} must be a boolean, got {value!r}")
        return value
    if t == "str":
        if not isinstance(value, str):
            raise ConfigurationError(f"{path!r} must be a string, got {value!r}")
        return value
    raise ConfigurationError(f"unsupported config field type {t!r} at {path!r}")


def _coerce_scalar(target, value, path: str):
    if isinstance(value, bool):
        raise ConfigurationError(f"{path!r} must be a number, got a boolean")
    if target is float and isinstance(value, (int, float)):
        return float(value)
    if target is int:
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigurationError(f"{path!r} must be an integer, got {value!r}")
    if not isinstance(value, (int, float)):
        raise ConfigurationError(f"{path!r} must be a number, got {value!r}")
    return target(value)


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config document must be a mapping")
    unknown = set(data) - (set(_SECTION_TYPES) | {"version", "master_seed"})
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {sorted(unknown)}")
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigurationError(f"unsupported config version {version!r}")
    kwargs = {"version": version}
    seed = data.get("master_seed", 0)
    if not isinstance(seed, int) or seed < 0 or seed >= 2**64:
        raise ConfigurationError("master_seed must be an unsigned 64-bit integer")
    kwargs["master_seed"] = seed
    for name, cls in _SECTION_TYPES.items():
        if name in data:
            kwargs[name] = _build_dataclass(cls, data[name], name)
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}: {e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"malformed config {path}: {e}") from e
    if data is None:
        data = {}
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides on top of an existing config.

    Values are parsed as YAML scalars, so ``--set crowd.density=1.5`` and
    ``--set sensing.blind_zone_enabled=false`` both do what they look like.
    """
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"cannot parse override value {raw!r}: {e}") from e
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigurationError(f"unknown config section {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return config_from_dict(data)
