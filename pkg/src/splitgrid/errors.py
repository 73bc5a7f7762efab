"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so each class carries the code
it should surface as.
"""


class SplitGridError(Exception):
    exit_code = 1


class ConfigError(SplitGridError, ValueError):
    """Invalid configuration or call-site contract."""

    exit_code = 2


class DimensionError(ConfigError):
    """Tensor shapes do not line up."""


class DataError(SplitGridError, ValueError):
    """Malformed or insufficient input data."""

    exit_code = 3


class NumericError(SplitGridError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""

    exit_code = 4


class NonRealInverseError(NumericError):
    """Inverse DFT left a significant imaginary residual."""


class ProtocolError(SplitGridError, RuntimeError):
    exit_code = 4


class VersionError(SplitGridError, ValueError):
    """Checkpoint or frame does not match the expected format or config."""

    exit_code = 3
