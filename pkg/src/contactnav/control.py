"""Action-to-command pipeline: desired velocity plus PD stabilization.

The policy outputs a speed, a motion heading, and a camera heading.  Speed
and motion heading define the desired world-frame velocity; a proportional
law on the velocity error produces the command force, and a PD law on the
camera heading error produces the yaw torque.  Saturation (max acceleration,
speed, yaw rate) is applied downstream by the physics engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ControlConfig
from .sensing import wrap_angle


@dataclass(frozen=True)
class Action:
    """Policy output triple; ranges are enforced by the squash at the policy."""

    speed: float  # in [0, v_max]
    motion_heading: float  # (-pi, pi]
    camera_heading: float  # (-pi, pi]

    def as_array(self) -> np.ndarray:
        return np.array([self.speed, self.motion_heading, self.camera_heading])


def desired_velocity(action: Action) -> np.ndarray:
    """World-frame velocity setpoint v_d * (cos heading, sin heading)."""
    return np.array([
        action.speed * math.cos(action.motion_heading),
        action.speed * math.sin(action.motion_heading),
    ])


def pd_command(
    velocity: np.ndarray,
    camera_heading: float,
    camera_yaw_rate: float,
    mass: float,
    inertia: float,
    velocity_setpoint: np.ndarray,
    camera_setpoint: float,
    gains: ControlConfig,
    measured_accel: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Command force and camera torque stabilizing the setpoints.

    The velocity loop is proportional on the velocity error; the optional
    derivative term acts on measured acceleration and defaults off.  The
    camera error is wrapped so the torque always takes the short way around.
    """
    force = mass * gains.kp_v * (velocity_setpoint - velocity)
    if measured_accel is not None and gains.kd_v != 0.0:
        force = force - mass * gains.kd_v * measured_accel
    err = wrap_angle(camera_setpoint - camera_heading)
    torque = inertia * (gains.kp_cam * err - gains.kd_cam * camera_yaw_rate)
    return force, torque
