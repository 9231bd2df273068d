"""Exception types shared across the package."""


class NgramShapError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(NgramShapError):
    """A file (embeddings, corpus, model) does not match its expected format."""


class ShapeError(NgramShapError):
    """Array dimensions are inconsistent with the operation's contract."""


class BudgetError(NgramShapError):
    """The requested computation exceeds the exact-enumeration guard."""


class RankDeficiencyError(NgramShapError):
    """The weighted least-squares system is singular.

    Carries the observed rank and the rank needed to identify all
    attributions, so callers can tell how far short the budget fell.
    """

    def __init__(self, rank: int, needed: int, message: str | None = None):
        self.rank = rank
        self.needed = needed
        super().__init__(
            message
            or f"normal equations are rank deficient (rank {rank}, need {needed}); "
            f"increase the coalition budget or pass allow_rank_deficient=True"
        )


class LocalAccuracyError(NgramShapError):
    """An attribution vector fails the base + sum(phi) = f(x) identity."""


class TrainingDivergedError(NgramShapError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}; lower the learning rate")


class ConfigError(NgramShapError):
    """A configuration value is invalid (e.g. a covariance that is not SPD)."""
