"""Exception hierarchy.

Two families matter to callers: `PreconditionError` means the input is
outside the regime where a construction is guaranteed to work, and
`InternalBoundViolation` means a guaranteed bound failed on valid input.
The CLI maps them to exit codes 2 and 3.
"""

from contextlib import contextmanager


class AfflowError(Exception):
    """Base class. `info` carries the measured quantities."""

    def __init__(self, message, **info):
        super().__init__(message)
        self.info = info
        self.stage = info.get("stage")

    def to_dict(self):
        out = {"error": type(self).__name__, "message": str(self),
               "stage": self.stage}
        for key, val in self.info.items():
            if key == "stage":
                continue
            out[key] = val if isinstance(val, (str, int, float, type(None))) else repr(val)
        return out


class PreconditionError(AfflowError):
    pass


class InternalBoundViolation(AfflowError):
    pass


class EigenSolverError(AfflowError):
    pass


class NearSingular(PreconditionError):
    pass


class DimensionMismatch(PreconditionError):
    pass


class GapTooSmall(PreconditionError):
    pass


class ContourHitsSpectrum(PreconditionError):
    pass


class DriftTooLarge(PreconditionError):
    pass


class SpectralBandViolation(PreconditionError):
    pass


class CocycleTooLarge(PreconditionError):
    pass


class PhaseUndefined(PreconditionError):
    pass


class GroundDegenerate(PreconditionError):
    pass


class WindowEmpty(PreconditionError):
    pass


class AmbiguousRotation(PreconditionError):
    pass


class DefectTooLarge(PreconditionError):
    pass


class NotInvariant(PreconditionError):
    pass


class BudgetExhausted(PreconditionError):
    pass


class ArtifactMissing(PreconditionError):
    pass


@contextmanager
def staged(name):
    """Prefix the stage path of errors raised inside the block."""
    try:
        yield
    except AfflowError as exc:
        if exc.stage is None:
            exc.stage = name
        else:
            exc.stage = f"{name}/{exc.stage}"
        raise
