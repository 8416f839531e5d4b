"""Exception hierarchy shared across the package."""


class NanomtError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(NanomtError):
    """An argument or call violates a documented precondition."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible for the requested operation."""


class TaskNotFoundError(NanomtError):
    """A task id was requested that is not registered."""


class TaskExistsError(NanomtError):
    """A task id was registered twice."""


class VocabularyMismatchError(NanomtError):
    """A corpus or bundle does not match the model's vocabulary."""


class CheckpointError(NanomtError):
    """A checkpoint file is malformed or incompatible."""
