"""Exception hierarchy for anchormix."""


class AnchorMixError(Exception):
    """Base class for all package errors."""


class ValidationError(AnchorMixError, ValueError):
    """Inputs violate a documented precondition."""


class InvalidParameterError(ValidationError):
    pass


class InfeasibleBudgetError(ValidationError):
    pass


class EnumerationTooLargeError(ValidationError):
    pass


class FactorialCapError(ValidationError):
    pass


class ParseError(ValidationError):
    """A data file cell could not be read; carries the offending coordinate."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class SchemaError(ValidationError):
    pass


class DegenerateSeriesError(ValidationError):
    pass


class NumericalError(AnchorMixError, ArithmeticError):
    """A computation produced a non-finite or degenerate quantity."""


class NumericalDegeneracyError(NumericalError):
    pass


class WeightMapUndefinedError(NumericalError):
    pass


class AllStartsFailedError(NumericalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class ChainFailureError(NumericalError):
    def __init__(self, message, chain=None, iteration=None):
        super().__init__(message)
        self.chain = chain
        self.iteration = iteration
