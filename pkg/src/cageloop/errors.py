"""Exception hierarchy shared by every stage of the caging-loop pipeline."""


class CageLoopError(Exception):
    """Base class for all library errors."""


class ParseError(CageLoopError):
    pass


class DegenerateInput(CageLoopError):
    pass


class BadParams(CageLoopError):
    pass


class SingularSystem(CageLoopError):
    pass


class TooManyPoints(CageLoopError):
    pass


class EmptyGraspingSpace(CageLoopError):
    pass


class NoObjectVoxels(CageLoopError):
    pass


class BaseNotInGraspingSpace(CageLoopError):
    pass


class DegenerateLoop(CageLoopError):
    pass


class CollapsedLoop(CageLoopError):
    pass


class CollinearLoop(CageLoopError):
    pass


class NoValidOrigin(CageLoopError):
    pass


class NoBasePoints(CageLoopError):
    pass


class EmptyResult(CageLoopError):
    """No loop survived filtering. ``killed_by`` names the filter that
    rejected the last remaining candidate."""

    def __init__(self, message, killed_by=None, report=None):
        super().__init__(message)
        self.killed_by = killed_by
        self.report = report


class StageError(CageLoopError):
    """Wraps an error raised inside a pipeline stage, keeping the stage tag."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
