"""Exception hierarchy for the funcground package.

Everything raised deliberately by this package derives from FuncGroundError,
so batch drivers can catch a single type at query boundaries.
"""


class FuncGroundError(Exception):
    """Base class for all funcground errors."""


class MissingFile(FuncGroundError):
    """A file named by a scene manifest or CLI argument does not exist."""


class SchemaViolation(FuncGroundError):
    """A manifest or wire payload is malformed; the message names the field."""


class InvariantViolation(FuncGroundError):
    """Loaded data breaks a structural invariant (poses, timestamps, bounds)."""


class IoFailure(FuncGroundError):
    """A filesystem write failed."""


class InvalidIteration(FuncGroundError):
    """Sampling iteration lies outside 1..K."""


class IndexOutOfRange(FuncGroundError):
    """Frame index lies outside the video."""


class EmptyFrameSet(FuncGroundError):
    """A survey prompt was requested with no frames attached."""


class EmptyObjectName(FuncGroundError):
    """A prompt template requires a non-empty object name."""


class ParseFailure(FuncGroundError):
    """Response text contains no parseable affordance block."""


class MissingFrameIndex(FuncGroundError):
    """The response was required to name a frame but did not."""


class BackendUnavailable(FuncGroundError):
    """A backend could not be reached after the configured retries."""


class BackendError(FuncGroundError):
    """A backend answered with a non-success status; body attached."""

    def __init__(self, status: int, body: str):
        super().__init__(f"backend returned status {status}: {body[:200]}")
        self.status = status
        self.body = body


class EmptyResult(FuncGroundError):
    """Segmentation produced no mask above the confidence threshold."""


class DimensionMismatch(FuncGroundError):
    """Mask and image dimensions disagree."""


class PixelOutOfBounds(FuncGroundError):
    """A pixel coordinate lies outside the image."""


class AllIterationsInvalid(FuncGroundError):
    """No sampling iteration produced a valid candidate frame."""

    def __init__(self, message: str, candidates=()):
        super().__init__(message)
        self.candidates = list(candidates)


class NoValidCandidates(FuncGroundError):
    """Object-name resolution needs at least one valid candidate."""


class FineStageEmpty(FuncGroundError):
    """No frame in any temporal window yielded an affordance point."""


class MissingGroundTruth(FuncGroundError):
    """Evaluation requires a ground-truth mask for every query."""


class InvisibleTarget(FuncGroundError):
    """A generated scene never shows one of its target parts."""
