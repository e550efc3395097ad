"""Exception hierarchy shared by all mobflow modules."""


class MobflowError(Exception):
    """Base class for all errors raised by this package."""


class SingularSystem(MobflowError):
    """Pure-Neumann elliptic solve requested with incompatible (nonzero-mean) data."""


class NoConvergence(MobflowError):
    """An iterative solver hit its iteration cap.

    The ``best`` attribute, when set, carries the best iterate found so far.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class BadExponent(MobflowError):
    """A norm or estimate was requested with an exponent outside its valid range."""


class SingularMobility(MobflowError):
    """Operation needs a derivative or entropy of the mobility at a point where it is singular."""


class InvalidPath(MobflowError):
    """A transport path violates its structural invariants (e.g. negative density)."""


class MassMismatch(MobflowError):
    """Endpoint measures of a transport problem do not carry equal mass."""


class StepRejected(MobflowError):
    """A minimizing-movement step failed its comparison inequality.

    ``partial`` carries the trajectory accumulated before the failure, when available.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class CflViolation(MobflowError):
    """Requested explicit time step exceeds the stability bound.

    ``snapshots`` carries the states recorded before the violation, when available.
    """

    def __init__(self, message, snapshots=None):
        super().__init__(message)
        self.snapshots = snapshots


class GridMismatch(MobflowError):
    """Two fields or trajectories live on incompatible grids."""


class ConfigError(MobflowError):
    """A run configuration failed validation; message lists all violations."""


class IoError(MobflowError):
    """An artifact could not be written or read."""
