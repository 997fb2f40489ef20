"""Exception hierarchy shared by all modules."""


class PathGibbsError(Exception):
    """Base class for all library-specific failures."""


class SimulationError(PathGibbsError):
    """Non-finite coefficient or state encountered during path simulation."""


class ControlEvaluationError(SimulationError):
    """A control field produced a non-finite value during simulation."""


class StabilityError(SimulationError):
    """A controlled drift increment exceeded the configured per-step cap."""


class CapabilityError(PathGibbsError):
    """The model lacks a declared capability required by the operation."""


class DegenerateEnergyError(PathGibbsError):
    """All reference mass sits on infinite energy; the tilt is undefined."""


class DegenerateWeightsError(PathGibbsError):
    """Importance weights collapsed (effective sample size below 2)."""


class DegenerateSurvivalError(PathGibbsError):
    """Every path was killed before the terminal time."""


class UnreliableEstimateError(PathGibbsError):
    """A Monte Carlo mean underflowed; increase samples or use control variates."""


class ConvergenceError(PathGibbsError):
    """An iterative scheme did not reach tolerance within its iteration budget."""

    def __init__(self, message: str, residual_history=None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])


class ConservationError(PathGibbsError):
    """A conservative solve drifted in total mass beyond tolerance."""


class PositivityError(PathGibbsError):
    """A density or kernel value that must stay positive did not."""


class SupportError(PathGibbsError):
    """A density is zero where the operation requires positive mass."""
