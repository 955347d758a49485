"""Deterministic 2D simulator and PPO stack for contact-based crowd navigation."""

from .config import RunConfig, load_config
from .control import Action
from .env import CorridorEnv
from .world import CorridorWorld, GlobalPath, OccupancyGrid, generate_corridor

__version__ = "0.1.0"

__all__ = [
    "Action",
    "CorridorEnv",
    "CorridorWorld",
    "GlobalPath",
    "OccupancyGrid",
    "RunConfig",
    "generate_corridor",
    "load_config",
    "__version__",
]
