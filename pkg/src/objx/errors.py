"""Exception types shared across the package."""


class FormatError(ValueError):
    """A file or stream does not conform to its declared on-disk format."""


class InvalidInputError(ValueError):
    """An operation received arguments outside its contract."""


class ConfigError(ValueError):
    """Parameters, checkpoints, or configuration are mutually inconsistent."""


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; carries the iteration and loss value."""

    def __init__(self, iteration: int, loss: float, detail: str = ""):
        self.iteration = iteration
        self.loss = loss
        msg = f"non-finite loss {loss!r} at iteration {iteration}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
