"""Exception types shared across the package."""


class ContactNavError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ContactNavError):
    """A configuration value is invalid or an unknown key was supplied."""


class PlanningError(ContactNavError):
    """Global planning failed (blocked endpoint or no path)."""


class SpawnError(ContactNavError):
    """Crowd placement failed after the configured number of attempts."""


class SimulationDivergedError(ContactNavError):
    """Physics produced a non-finite state; the episode is aborted as a fault."""


class ContractViolationError(ContactNavError):
    """A caller violated an operation's documented precondition."""


class ChecksumMismatchError(ContactNavError):
    """A checkpoint's interface digest does not match the active configuration."""


class ReplayDivergenceError(ContactNavError):
    """A re-simulated episode diverged from its log."""

    def __init__(self, step: int, field: str, logged, computed):
        self.step = step
        self.field = field
        self.logged = logged
        self.computed = computed
        super().__init__(
            f"replay diverged at step {step}: field {field!r} logged={logged!r} "
            f"computed={computed!r}"
        )
