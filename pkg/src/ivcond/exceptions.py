"""Error and warning types raised across the package."""


class IVCondError(Exception):
    """Base class for errors raised by ivcond."""


class DegenerateDenominator(IVCondError):
    """The selected complement carries no usable instrument strength."""


class AllInvalid(IVCondError):
    """Every candidate instrument was flagged invalid; nothing identifies the effect."""


class NoConvergence(IVCondError):
    """Coordinate descent failed to reach tolerance; inputs are likely ill-scaled."""


class StuckChain(IVCondError):
    """A sampler block accepted nothing over the whole run."""


class DegenerateWeights(IVCondError):
    """Importance weights collapsed onto a single draw; resample nearer the target."""


class BracketNotFound(IVCondError):
    """Interval inversion could not bracket the pivot targets."""

    def __init__(self, message, last_pivots=None):
        super().__init__(message)
        self.last_pivots = last_pivots


class NegativeVariance(IVCondError):
    """A reconstructed residual variance came out non-positive."""


class InconsistentScale(UserWarning):
    """Exposure-side summary identities disagree; diagonality/centering suspect."""
