"""Exception types raised across the package."""


class RfcrpoError(ValueError):
    """Base class for all contract violations raised by rfcrpo."""


class NonSymmetric(RfcrpoError):
    pass


class NotPSD(RfcrpoError):
    pass


class BadCondition(RfcrpoError):
    pass


class ShapeMismatch(RfcrpoError):
    pass


class EmptyBatch(RfcrpoError):
    pass


class EmptyDataset(RfcrpoError):
    pass


class TooFewCandidates(RfcrpoError):
    pass


class TooFewSamples(RfcrpoError):
    pass


class ZeroVariance(RfcrpoError):
    pass


class MissingCell(RfcrpoError):
    pass


class NoComparisons(RfcrpoError):
    pass


class CheckpointError(RfcrpoError):
    pass


class ScoreParseError(RfcrpoError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
