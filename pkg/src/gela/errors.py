"""Exception types shared across the package."""


class GelaError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(GelaError, ValueError):
    pass


class NumericError(GelaError, FloatingPointError):
    pass


class ContractError(GelaError, ValueError):
    pass


class LengthError(GelaError, ValueError):
    pass


class MaskError(GelaError, ValueError):
    pass


class BoxError(GelaError, ValueError):
    pass


class DataError(GelaError, ValueError):
    pass


class ShuffleError(GelaError, RuntimeError):
    pass


class SkipSignal(GelaError):
    """Raised when a batch item has nothing to supervise and must be dropped."""


class ParamError(GelaError, ValueError):
    pass


class ActionError(GelaError, ValueError):
    pass


class UnreachableError(GelaError, RuntimeError):
    pass


class ParseError(GelaError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class SchemaError(GelaError, ValueError):
    def __init__(self, message, path="$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class VersionError(GelaError, ValueError):
    pass
