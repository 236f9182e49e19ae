"""Exception types shared across the package."""


class DecodeError(ValueError):
    """A container file is malformed. ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class NotTrainedError(RuntimeError):
    """A component that must be trained first was used at initialization state."""


class TrainingDiverged(RuntimeError):
    """A training loop produced a non-finite loss and was aborted."""
