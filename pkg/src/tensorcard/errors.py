"""Exception taxonomy.

Every error carries an ``exit_code`` so the command line can map failures to
its documented exit statuses without a lookup table.
"""


class TensorCardError(Exception):
    exit_code = 1


class ConfigError(TensorCardError):
    exit_code = 2


class DataError(TensorCardError):
    exit_code = 3


class InvalidTensorError(DataError, ValueError):
    pass


class ShapeError(DataError, ValueError):
    pass


class TooLargeError(DataError):
    pass


class ParseError(DataError, ValueError):
    """Malformed input text; ``line`` (1-based) or ``position`` when known."""

    def __init__(self, message, line=None, position=None):
        where = ""
        if line is not None:
            where = f"line {line}: "
        elif position is not None:
            where = f"position {position}: "
        super().__init__(where + message)
        self.line = line
        self.position = position


class EmptyInputError(DataError):
    pass


class DataValueError(DataError, ValueError):
    pass


class SchemaError(DataError):
    pass


class QueryError(DataError, ValueError):
    pass


class PlanError(DataError, ValueError):
    pass


class MetricError(TensorCardError, ValueError):
    pass


class GenerationError(DataError):
    pass


class InfeasibleDesignError(TensorCardError):
    exit_code = 4

    def __init__(self, message, subset=None):
        super().__init__(message)
        self.subset = subset


class CoverageError(InfeasibleDesignError):
    """Raised when a design leaves subsets uncovered; ``uncovered`` lists them."""

    def __init__(self, message, uncovered=()):
        super().__init__(message)
        self.uncovered = list(uncovered)


class NumericError(TensorCardError):
    exit_code = 5


class DegenerateColumnError(NumericError):
    def __init__(self, axis, component, column_sum):
        super().__init__(
            f"factor column {component} of axis {axis} has signed sum "
            f"{column_sum:.3g}; cannot L1-normalize"
        )
        self.axis = axis
        self.component = component
