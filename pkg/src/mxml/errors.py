"""Exception hierarchy. The CLI maps these to exit codes."""


class MXMLError(Exception):
    exit_code = 1


class ConfigError(MXMLError, ValueError):
    exit_code = 1


class ShapeError(MXMLError, ValueError):
    """Dimension or length mismatch between tensors or sequences."""

    exit_code = 2


class DataError(MXMLError, ValueError):
    exit_code = 2


class FormatError(DataError):
    """Malformed on-disk file. ``offset`` is the byte or line position."""

    def __init__(self, msg, offset=None):
        if offset is not None:
            msg = f"{msg} (at offset {offset})"
        super().__init__(msg)
        self.offset = offset


class NumericalError(MXMLError, ArithmeticError):
    exit_code = 3
