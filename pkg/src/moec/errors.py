"""Exception hierarchy shared by all moec modules.

Each category maps to a distinct CLI exit code so scripted callers can
tell configuration mistakes from corrupt files or numeric blowups.
"""


class MoecError(Exception):
    exit_code = 1


class ConfigError(MoecError):
    """Invalid or inconsistent configuration values."""

    exit_code = 3


class DimensionError(MoecError):
    """Tensor shapes incompatible with the requested operation."""

    exit_code = 4


class FormatError(MoecError):
    """Corrupt or unreadable file (model file, IDX, capture)."""

    exit_code = 5


class NumericError(MoecError):
    """Non-finite values where finite ones are required."""

    exit_code = 6


class ValidationError(MoecError):
    """Well-formed input that violates a semantic contract."""

    exit_code = 7


class DegenerateStatisticsError(MoecError):
    """Statistics undefined for the given sample (singleton cluster, all-zero variance)."""

    exit_code = 8


class RoutingError(MoecError):
    """Token cannot be routed (zero-norm input under cosine)."""

    exit_code = 9
