"""Exception hierarchy. Each category maps to a distinct CLI exit code."""


class PacdaError(Exception):
    exit_code = 1
    category = "error"


class ShapeError(PacdaError, ValueError):
    category = "dimension"


class DomainError(PacdaError, ValueError):
    """Math domain violation, e.g. log of a nonpositive value."""

    category = "domain"


class NonFiniteError(PacdaError, FloatingPointError):
    category = "nonfinite"


class ContractError(PacdaError, ValueError):
    category = "contract"


class ConfigError(PacdaError, ValueError):
    exit_code = 3
    category = "config"


class DataError(PacdaError, ValueError):
    exit_code = 3
    category = "data"


class LedgerError(PacdaError):
    exit_code = 5
    category = "ledger"


class BankError(PacdaError, KeyError):
    exit_code = 5
    category = "bank"

    def __str__(self):
        # KeyError would otherwise repr() the message
        return str(self.args[0]) if self.args else ""


class FormatError(PacdaError, ValueError):
    exit_code = 4
    category = "format"


class CheckpointError(PacdaError):
    exit_code = 4
    category = "checkpoint"


class CheckpointVersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
