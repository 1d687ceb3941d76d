"""Exception taxonomy shared across the package.

Every error a run can die with falls into one of four categories
(configuration / ingestion / numeric / I/O) so the command-line layer can
map failures to distinct exit codes.
"""


class DocadaptError(Exception):
    """Base class for all package-specific errors."""

    exit_code = 1


class ConfigurationError(DocadaptError):
    """Invalid configuration value, unknown preset/mapping name, taxonomy mismatch."""

    exit_code = 3


class IngestionError(DocadaptError):
    """Malformed input data (annotation files, mapping files)."""

    exit_code = 4


class NumericError(DocadaptError):
    """Non-finite loss or metric encountered during a run."""

    exit_code = 5


class RunIOError(DocadaptError):
    """Filesystem problem while reading or writing run artifacts."""

    exit_code = 6


class ContractViolationError(DocadaptError):
    """An operation was called with inputs violating its documented contract."""

    exit_code = 3


class CheckpointError(DocadaptError):
    """Checkpoint file is truncated, corrupt, or from an incompatible version."""

    exit_code = 4


class EvaluationError(DocadaptError):
    """Evaluation was requested on inputs with no scoreable categories."""

    exit_code = 3
