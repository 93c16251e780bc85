"""Exception hierarchy. Each class carries the error class reported by the CLI."""


class EnergyTreeError(Exception):
    error_class = "data"
    exit_code = 5


class UsageError(EnergyTreeError):
    error_class = "usage"
    exit_code = 2


class ParseError(EnergyTreeError):
    error_class = "parse"
    exit_code = 3


class SchemaError(ParseError):
    """Structured document parsed but does not match the schema."""


class ValidationError(EnergyTreeError):
    error_class = "validation"
    exit_code = 4

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataError(EnergyTreeError):
    error_class = "data"
    exit_code = 5


class NumericError(EnergyTreeError):
    error_class = "numeric"
    exit_code = 6
