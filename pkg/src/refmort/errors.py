"""Exception types shared across the toolkit, with their process exit codes."""

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NONCONVERGENCE = 3
EXIT_CONFIG = 4


class RefmortError(Exception):
    """Base class for all toolkit errors."""

    exit_code = EXIT_INPUT


class SchemaError(RefmortError):
    """An input file does not match the documented column layout."""


class ValidationError(RefmortError):
    """Input data violates a structural invariant.

    ``violations`` holds one human-readable line per offending cell/row.
    """

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class InputError(RefmortError):
    """Inputs are structurally valid but unusable for the requested operation."""


class TruncationError(InputError):
    """A stratum's time since invitation exceeds the historic lag support."""


class EstimationError(RefmortError):
    """An estimation step cannot produce a result from the given data."""


class ConvergenceError(RefmortError):
    """An iterative fit diverged or exhausted its iteration budget.

    ``trace`` carries the objective history for diagnosis.
    """

    exit_code = EXIT_NONCONVERGENCE

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class ConfigurationError(RefmortError):
    """The run configuration is inconsistent or incomplete."""

    exit_code = EXIT_CONFIG
