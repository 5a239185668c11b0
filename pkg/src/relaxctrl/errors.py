"""Exception types raised by relaxctrl."""


class RelaxCtrlError(Exception):
    """Base class for all library errors."""


class GridError(RelaxCtrlError, ValueError):
    pass


class FeasibilityError(RelaxCtrlError, ValueError):
    """A control value lies outside the control set B."""


class DimensionError(RelaxCtrlError, ValueError):
    pass


class MissingDerivativeError(RelaxCtrlError):
    """A derivative evaluator needed by the adjoint or Hamiltonian is absent."""


class ConfigError(RelaxCtrlError, ValueError):
    pass
