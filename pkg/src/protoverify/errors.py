"""Exception hierarchy.

Three families map onto the CLI exit codes: configuration problems (1),
data problems (2) and numerical failures (3).
"""

from __future__ import annotations


class ProtoVerifyError(Exception):
    exit_code = 3

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "message": str(self)}


class ConfigError(ProtoVerifyError):
    exit_code = 1


class DataError(ProtoVerifyError):
    exit_code = 2


class NumericalError(ProtoVerifyError):
    exit_code = 3


# -- ingestion ---------------------------------------------------------------

class MalformedRow(DataError):
    def __init__(self, line: int, reason: str = "malformed row"):
        self.line = line
        super().__init__(f"line {line}: {reason}")

    def to_dict(self) -> dict:
        return {**super().to_dict(), "line": self.line}


class NonMonotonicTime(DataError):
    def __init__(self, cycle: int):
        self.cycle = cycle
        super().__init__(f"time is not strictly increasing in cycle {cycle}")


class EmptyDataset(DataError):
    pass


class MissingInput(DataError):
    def __init__(self, path: str):
        self.path = str(path)
        super().__init__(f"input not found: {path}")

    def to_dict(self) -> dict:
        return {**super().to_dict(), "path": self.path}


class SegmentationFailure(DataError):
    pass


class NonPositiveNominal(DataError):
    pass


# -- featurization -----------------------------------------------------------

class DegenerateSegment(DataError):
    pass


class ZeroCurrentDelta(NumericalError):
    pass


class EmptyFitSet(DataError):
    pass


class TooFewSamples(DataError):
    pass


# -- neural ------------------------------------------------------------------

class NonFiniteLoss(NumericalError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"loss became non-finite at epoch {epoch}")


# -- transfer ----------------------------------------------------------------

class WindowOutOfRange(DataError):
    pass


class ZeroSourceRate(NumericalError):
    pass


class SourceHorizonExhausted(UserWarning):
    """Warning: a source ran out of data before the extrapolation horizon."""


# -- verify ------------------------------------------------------------------

class InsufficientSourceData(DataError):
    pass


class LengthMismatch(DataError):
    pass


class ZeroDenominator(NumericalError):
    pass


class IllConditionedFit(NumericalError):
    pass


class StageError(ProtoVerifyError):
    """Wraps an upstream failure with the pipeline stage it happened in."""

    def __init__(self, stage: str, cause: ProtoVerifyError):
        self.stage = stage
        self.cause = cause
        self.exit_code = cause.exit_code
        super().__init__(f"[{stage}] {cause}")

    def to_dict(self) -> dict:
        return {**self.cause.to_dict(), "stage": self.stage}


# -- interpret ---------------------------------------------------------------

class EmptyWindow(DataError):
    pass


class AllZeroImportance(NumericalError):
    pass


class EmptySample(DataError):
    pass


class TooFewCycles(DataError):
    pass


class NonPositiveRate(NumericalError):
    pass


# -- simulate ----------------------------------------------------------------

class SocOutOfRange(NumericalError):
    pass


# -- econ --------------------------------------------------------------------

class MissingPrice(DataError):
    def __init__(self, material: str):
        self.material = material
        super().__init__(f"no price for material {material!r}")


class IncompleteRoute(DataError):
    pass


class MissingIntensity(DataError):
    def __init__(self, material: str, category: str):
        self.material = material
        self.category = category
        super().__init__(f"no impact intensity for {material!r} in category {category!r}")


class DegenerateAnchors(NumericalError):
    pass
