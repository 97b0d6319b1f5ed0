"""Exception hierarchy. The CLI maps these onto exit codes."""


class InasError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(InasError, ValueError):
    pass


class ShapeError(InasError, ValueError):
    pass


class NetworkValidationError(InasError, ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class DesignError(InasError, ValueError):
    pass


class FeasibilityError(InasError):
    """A design cannot complete under the given power and cost parameters."""

    def __init__(self, reason):
        self.reason = reason
        super().__init__(str(reason))


class UnrecoverableStateError(InasError):
    """Both snapshot slots are corrupt. The commit protocol should make this unreachable."""


class SupplyError(InasError):
    pass


class ParseError(InasError, ValueError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class SchemaError(InasError, ValueError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")
