"""Exception types raised across the package."""


class LaneMpcError(Exception):
    """Base class for all package errors."""


class MalformedConfig(LaneMpcError):
    pass


class InconsistentGraph(LaneMpcError):
    def __init__(self, invariant, detail=""):
        self.invariant = invariant
        msg = f"{invariant}: {detail}" if detail else invariant
        super().__init__(msg)


class UnknownLane(LaneMpcError, KeyError):
    pass


class ShapeMismatch(LaneMpcError, ValueError):
    pass


class InfeasibleControl(LaneMpcError):
    pass


class InfeasibleBox(LaneMpcError):
    pass


class InsufficientHistory(LaneMpcError):
    pass


class MissingNeighborTrajectory(LaneMpcError):
    pass


class MissingMessage(LaneMpcError):
    pass


class Divergence(LaneMpcError):
    pass


class SolverNonconvergence(LaneMpcError):
    pass


class EmptyRun(LaneMpcError):
    pass


class MismatchedScenario(LaneMpcError):
    pass
