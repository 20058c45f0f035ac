"""Exception hierarchy shared by every pointcaps module."""


class PointCapsError(Exception):
    """Base class for all library errors."""


class DimensionError(PointCapsError, ValueError):
    pass


class ConfigurationError(PointCapsError, ValueError):
    pass


class InputError(PointCapsError, ValueError):
    pass


class ContractError(PointCapsError, ValueError):
    pass


class TapeError(PointCapsError, RuntimeError):
    pass


class NonFiniteError(PointCapsError, FloatingPointError):
    pass


class DivergenceError(PointCapsError, FloatingPointError):
    pass


class ParseError(PointCapsError, ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class CheckpointVersionError(PointCapsError, ValueError):
    pass
