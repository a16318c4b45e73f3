"""Exception hierarchy shared by every ramannet module."""


class RamanNetError(Exception):
    """Base class for all library errors."""


class ShapeError(RamanNetError, ValueError):
    pass


class ConfigError(RamanNetError, ValueError):
    pass


class LabelError(RamanNetError, ValueError):
    pass


class InputTooShortError(ShapeError):
    pass


class NoCommonRangeError(RamanNetError, ValueError):
    pass


class ExtrapolationError(RamanNetError, ValueError):
    pass


class SpectrumParseError(RamanNetError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class EmptyDatasetError(RamanNetError, ValueError):
    pass


class StratificationError(RamanNetError, ValueError):
    pass


class CheckpointError(RamanNetError):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or an unparsable header."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class TrainingDivergedError(RamanNetError, FloatingPointError):
    def __init__(self, epoch, batch, components):
        self.epoch = epoch
        self.batch = batch
        self.components = dict(components)
        parts = ", ".join(f"{k}={v!r}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} ({parts})")
