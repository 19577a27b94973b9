"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array argument has the wrong rank or dimensions."""


class UsageError(RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class TrainingError(RuntimeError):
    """Non-finite values appeared during optimization."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class IngestionError(ValueError):
    """A file could not be parsed.

    ``offset`` is the byte offset of the failure when known, ``record`` the
    index of the failing record for container formats.
    """

    def __init__(self, message, offset=None, record=None):
        parts = [message]
        if offset is not None:
            parts.append(f"at byte offset {offset}")
        if record is not None:
            parts.append(f"in record {record}")
        super().__init__(" ".join(parts))
        self.offset = offset
        self.record = record
