"""Exception and warning types raised across the package."""


class DCBError(Exception):
    """Base class for all package errors."""


class ParseError(DCBError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)


class MissingCell(DCBError):
    """The panel is not rectangular."""


class NonBinaryTreatment(DCBError):
    pass


class PeriodOutOfRange(DCBError):
    pass


class EmptyStratum(DCBError):
    """No unit follows a required treatment prefix."""

    def __init__(self, prefix, message=None):
        self.prefix = tuple(int(v) for v in prefix)
        if message is None:
            message = f"no unit matches treatment prefix {self.prefix}"
        super().__init__(message)


class Infeasible(DCBError):
    """The balancing program has no feasible point.

    Carries the period index (1-based) and, when available, the
    least-infeasible imbalance found by the feasibility LP.
    """

    def __init__(self, message, period=None, achieved_imbalance=None):
        self.period = period
        self.achieved_imbalance = achieved_imbalance
        super().__init__(message)


class NoFeasiblePoint(Infeasible):
    """Every configuration of a tuning grid was infeasible."""

    def __init__(self, message, period=None, achieved_imbalance=None, config=None):
        self.config = config
        super().__init__(message, period=period, achieved_imbalance=achieved_imbalance)


class NumericalFailure(DCBError):
    pass


class ZeroDenominator(DCBError):
    pass


class TooFewRows(DCBError):
    pass


class SeparationDetected(DCBError):
    """The binary response is constant, so the logistic MLE does not exist."""


class SeparationWarning(UserWarning):
    """Logistic coefficients diverged and were capped."""


class ConvergenceWarning(UserWarning):
    pass
