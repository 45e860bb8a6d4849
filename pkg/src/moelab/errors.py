"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes (config 2, numerical 3, I/O 4), so new
error types should subclass one of the categories below rather than raising
bare ValueError/RuntimeError.
"""


class MoelabError(Exception):
    """Base class for all package errors."""


class DimensionError(MoelabError, ValueError):
    """Shape mismatch between operands. Broadcasting is never implied."""


class ParameterError(MoelabError, ValueError):
    """Invalid argument to an operation (bad temperature, k out of range)."""


class InputError(MoelabError, ValueError):
    """Malformed or degenerate input data (non-finite logits, empty batch)."""


class ConfigError(MoelabError, ValueError):
    """Configuration violates a documented invariant."""


class OracleError(MoelabError, RuntimeError):
    """The finite-difference oracle hit a non-finite function value."""


class RoutingDegeneracyError(MoelabError, RuntimeError):
    """Fewer strictly positive masked probabilities than experts to select.

    Softmax outputs are strictly positive, so this signals a configuration
    bug upstream rather than an expected runtime condition.
    """


class DivergenceError(MoelabError, RuntimeError):
    """Training produced a non-finite loss; carries the offending step."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class TraceFormatError(MoelabError, ValueError):
    """A serialized routing trace line could not be parsed."""

    def __init__(self, message: str, line_number: int | None = None):
        super().__init__(message)
        self.line_number = line_number
