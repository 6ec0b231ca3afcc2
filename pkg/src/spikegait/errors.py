"""Exception types shared across the package."""


class SpikegaitError(Exception):
    """Base class for all errors raised by spikegait."""


class InvalidArgument(SpikegaitError, ValueError):
    pass


class InvalidStream(SpikegaitError, ValueError):
    pass


class FormatError(SpikegaitError, ValueError):
    """Malformed file. ``offset`` is the byte offset (or line number for CSV)."""

    def __init__(self, message, offset=None, record=None):
        self.offset = offset
        self.record = record
        parts = [message]
        if record is not None:
            parts.append(f"record {record}")
        if offset is not None:
            parts.append(f"byte offset {offset}")
        super().__init__(" at ".join(parts) if len(parts) > 1 else message)


class NumericError(SpikegaitError, ArithmeticError):
    pass


class StateError(SpikegaitError, RuntimeError):
    pass


class DataError(SpikegaitError, ValueError):
    pass


class ConfigError(SpikegaitError, ValueError):
    pass


class DegenerateEmbedding(NumericError):
    pass


class DegenerateBatch(SpikegaitError, ValueError):
    pass
