"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration.

    ``errors`` holds every problem found, each prefixed by its config path.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class ShapeError(ValueError):
    pass


class CapacityError(ValueError):
    """A partition asked for more examples of a class than remain."""


class DatasetParseError(ValueError):
    def __init__(self, message, offset=None, row=None):
        self.offset = offset
        self.row = row
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if row is not None:
            where.append(f"row {row}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)


class ProtocolFault(RuntimeError):
    """The message-passing protocol was violated (e.g. a missing message)."""


class NumericalFault(ProtocolFault):
    """Non-finite values appeared in a gradient or parameter vector."""
