"""Exception hierarchy shared by every module and surfaced by the CLI."""


class HcMambaError(Exception):
    """Base class; the CLI prints ``error[<ClassName>]: <message>`` for these."""


class DimensionError(HcMambaError, ValueError):
    """Shapes or extents are incompatible."""


class ContractError(HcMambaError, ValueError):
    """A precondition on arguments was violated."""


class DomainError(HcMambaError, ValueError):
    """A numeric argument is outside its mathematical domain."""


class TapeError(HcMambaError, RuntimeError):
    """Misuse of the gradient tape (detached loss, double backward, ...)."""


class DataError(HcMambaError, ValueError):
    """Dataset content is invalid (labels out of range, shape disagreement)."""


class FormatError(HcMambaError, ValueError):
    """A file does not follow its declared binary format."""


class CheckpointError(HcMambaError, ValueError):
    """Checkpoint manifest and blob disagree, or config does not match."""


class ConfigError(HcMambaError, ValueError):
    """Unknown or malformed configuration key."""


class TrainingDiverged(HcMambaError, RuntimeError):
    """Loss became non-finite during training."""
