"""Exception types raised across the toolkit."""


class WadampError(Exception):
    """Base class for all toolkit errors."""


class DimensionMismatch(WadampError):
    """Array shapes are inconsistent with the model structure."""


class NoConvergence(WadampError):
    """Iterative solver exhausted its budget (infeasible dispatch, singular Jacobian)."""


class DisconnectedNetwork(WadampError):
    """The bus graph is not connected."""


class SingularInteriorBlock(WadampError):
    """The eliminated block of the admittance matrix is singular."""


class RankDeficient(WadampError):
    """Regressor matrix lost column rank (insufficient excitation)."""


class NonPositiveEpsilon(WadampError):
    """A passivity-shortage coefficient that must be positive is not."""


class Infeasible(WadampError):
    """No certificate found within the iteration budget."""


class NotStronglyConnected(WadampError):
    """Communication topology admits no positive left null vector."""


class ZeroCouplingGain(WadampError):
    """Delay-robustness bound is undefined when the coupling gain is zero."""


class NonFiniteState(WadampError):
    """Integration produced NaN or Inf; the run is aborted."""


class InsufficientData(WadampError):
    """Trajectory too short for the requested metric."""


class ValidationError(WadampError):
    """Input file failed schema or semantic validation."""
