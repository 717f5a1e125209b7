"""Exception hierarchy shared by every module."""


class LSTransducerError(Exception):
    """Base class for all toolkit errors."""


class ContractError(LSTransducerError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes do not fit the primitive."""

    def __init__(self, primitive: str, shape_a, shape_b, detail: str = ""):
        self.primitive = primitive
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        message = f"{primitive}: incompatible shapes {self.shape_a} and {self.shape_b}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class DegenerateAlignmentError(ContractError):
    """Alignment weights carry no mass, so they cannot be rescaled."""


class ConfigError(ContractError):
    """Unknown configuration key or a value that cannot be coerced."""


class VocabularyMismatchError(ContractError):
    """Two components disagree on the vocabulary."""


class DataError(LSTransducerError):
    """A dataset, corpus or checkpoint file is missing or malformed."""


class NumericError(LSTransducerError):
    """Training diverged or a numerical check failed."""
