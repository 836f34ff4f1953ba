"""Exception types. ``exit_code`` is what the CLI returns for each family."""


class PembError(Exception):
    exit_code = 1


class ConfigError(PembError, ValueError):
    exit_code = 2


class DataError(PembError, ValueError):
    exit_code = 3


class NumericError(PembError, FloatingPointError):
    """A NaN or infinity appeared at an op boundary, or training diverged."""

    exit_code = 4


class CheckpointError(PembError):
    exit_code = 5
    code = "checkpoint"


class CorruptHeaderError(CheckpointError):
    code = "corrupt-header"


class TruncatedCheckpointError(CheckpointError):
    code = "truncated"


class ConfigHashMismatchError(CheckpointError):
    code = "hash-mismatch"


class DimMismatchError(CheckpointError):
    code = "dim-mismatch"


class ShapeError(PembError, ValueError):
    """Operand shapes are incompatible."""


class LengthError(PembError, ValueError):
    """A sequence does not fit the model's positional budget."""


class ContractError(PembError, ValueError):
    """A precondition of an operation does not hold."""


class TapeError(PembError, RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, dead tape, ...)."""


class LookupError_(PembError, IndexError):
    """Row index outside the table being gathered from."""


class DegenerateEmbeddingError(NumericError):
    """An embedding norm fell below the cosine-similarity floor."""
