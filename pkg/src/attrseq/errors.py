"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated a documented precondition (shape, range, finiteness)."""


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable: corrupt, truncated, or wrong version."""


class DataFileError(RuntimeError):
    """A dataset, vocab, or manifest file is missing or malformed."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss or gradient and was aborted."""
