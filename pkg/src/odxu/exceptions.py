"""Exception types shared across the toolkit."""


class OdxuError(Exception):
    """Base class for all toolkit-specific errors."""


class DataFormatError(OdxuError):
    """A data file violates its declared format (bad hex, bad header, ...)."""


class CheckpointError(OdxuError):
    """A checkpoint file is missing, corrupt, or incompatible."""


class TrainingDivergedError(OdxuError):
    """Training hit a non-finite loss.  Carries the epoch/batch it happened in."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


class StageError(OdxuError):
    """A pipeline stage failed.  Carries the stage name for actionable reporting."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
