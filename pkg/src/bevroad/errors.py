"""Exception hierarchy shared by all pipeline stages."""


class BevRoadError(Exception):
    """Base class for every error raised by this package."""


class MalformedFileError(BevRoadError):
    """A binary or text input does not follow its on-disk format."""


class CalibrationParseError(MalformedFileError):
    pass


class ImageFormatError(BevRoadError):
    pass


class DatasetLayoutError(BevRoadError):
    """Dataset root is missing a required subdirectory."""


class RangeError(BevRoadError, ValueError):
    pass


class ShapeError(BevRoadError, ValueError):
    pass


class ContractError(BevRoadError, ValueError):
    """A caller broke an operation's precondition."""


class DegenerateInputError(BevRoadError, ValueError):
    """Input leaves a metric or loss undefined (e.g. no valid pixels)."""


class ConfigError(BevRoadError, ValueError):
    pass


class DivergenceError(BevRoadError, RuntimeError):
    """Training produced a non-finite loss."""
