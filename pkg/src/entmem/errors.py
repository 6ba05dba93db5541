"""Exception types shared across the package."""


class EntmemError(Exception):
    pass


class DimensionMismatch(EntmemError, ValueError):
    pass


class FormatError(EntmemError, ValueError):
    """A binary file has a bad magic, header, or payload length."""


class VersionMismatch(FormatError):
    pass


class EmptyMask(EntmemError, ValueError):
    pass


class CoordinateOutOfRange(EntmemError, ValueError):
    pass


class DuplicateCoordinate(EntmemError, ValueError):
    pass


class LengthMismatch(EntmemError, ValueError):
    pass


class CountMismatch(EntmemError, ValueError):
    pass


class EmptyResult(EntmemError, ValueError):
    pass


class EmptyPairSet(EntmemError, ValueError):
    pass


class DegenerateInput(EntmemError, ValueError):
    pass


class InvalidEdges(EntmemError, ValueError):
    pass


class InvalidK(EntmemError, ValueError):
    pass


class StageError(EntmemError, RuntimeError):
    """Pipeline failure tagged with the shot number and stage name."""

    def __init__(self, shot_num: int, stage: str, cause: BaseException):
        super().__init__(f"shot {shot_num}, stage {stage!r}: {cause}")
        self.shot_num = shot_num
        self.stage = stage
        self.cause = cause
