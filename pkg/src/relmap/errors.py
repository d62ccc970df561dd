"""Exception types raised across the engine."""


class RelmapError(Exception):
    pass


class DimensionError(RelmapError, ValueError):
    pass


class InputError(RelmapError, ValueError):
    pass


class ConfigError(RelmapError, ValueError):
    pass


class StateError(RelmapError, RuntimeError):
    pass


class FormatError(RelmapError, ValueError):
    """Malformed IDX or checkpoint file. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class IncompleteRecordError(RelmapError, LookupError):
    pass


class RunawayDetectionError(RelmapError, RuntimeError):
    pass
