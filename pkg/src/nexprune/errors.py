class NexpruneError(Exception):
    """Base class for errors raised by this package."""


class ShapeMismatchError(NexpruneError, ValueError):
    pass


class NonFiniteError(NexpruneError, FloatingPointError):
    pass


class BackwardBeforeForwardError(NexpruneError, RuntimeError):
    pass


class CouplingError(NexpruneError, ValueError):
    """The graph cannot be partitioned into consistent coupling groups."""


class LayerCollapseError(NexpruneError, ValueError):
    """A removal would leave some layer with zero channels."""


class NoPrunableGroupError(NexpruneError, ValueError):
    pass
