"""Exception hierarchy shared by all modules."""


class ExAnteError(Exception):
    """Base class for toolkit errors."""


class DimensionError(ExAnteError, ValueError):
    pass


class RuleEvaluationError(ExAnteError):
    pass


class InfeasibleError(ExAnteError):
    """No report strategy (or no multiplier) satisfies the ex-ante constraint."""

    def __init__(self, message, best_constraint=None):
        super().__init__(message)
        self.best_constraint = best_constraint


class EnumerationCapError(ExAnteError):
    pass


class DegenerateScalingError(ExAnteError, ZeroDivisionError):
    """The payment scale c1 + r*c2 vanishes."""


class InconsistentPriceError(ExAnteError):
    """Nodes sharing an outcome disagree on the menu price."""

    def __init__(self, message, nodes=()):
        super().__init__(message)
        self.nodes = tuple(nodes)


class NonIntegrableError(ExAnteError):
    """Surrogate gradient field is not path independent."""

    def __init__(self, message, discrepancy):
        super().__init__(message)
        self.discrepancy = discrepancy


class AssumptionError(ExAnteError):
    """A structural precondition (linear form, regular grid, ...) does not hold."""


class ScenarioError(ExAnteError):
    pass
