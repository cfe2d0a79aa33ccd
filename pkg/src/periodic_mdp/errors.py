"""Exception hierarchy shared across the package."""


class PeriodicMDPError(Exception):
    """Base class for all library errors."""


class ConfigurationError(PeriodicMDPError, ValueError):
    """Inputs with inconsistent shapes or out-of-range parameters."""


class DomainError(PeriodicMDPError, ValueError):
    """A divergence or log evaluated outside its domain."""


class DualAscentError(PeriodicMDPError, RuntimeError):
    """Dual ascent hit its iteration budget with the constraint still violated."""

    def __init__(self, message, *, last_g, lam, iterations, last_result=None):
        super().__init__(message)
        self.last_g = last_g
        self.lam = lam
        self.iterations = iterations
        self.last_result = last_result


class InfeasibleError(PeriodicMDPError, RuntimeError):
    """No value on the contraction grid produced a feasible episode problem."""


class ConvergenceError(PeriodicMDPError, RuntimeError):
    """An iterative procedure did not converge within its budget."""


class SolverAbort(PeriodicMDPError, RuntimeError):
    """Raised by the online protocols when an episode solve fails."""

    def __init__(self, message, *, episode, diagnostics=None):
        super().__init__(message)
        self.episode = episode
        self.diagnostics = diagnostics or {}
