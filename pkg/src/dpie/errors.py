"""Exception types raised across the package."""


class DPIEError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(DPIEError, KeyError):
    """A required column is missing from an input table."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ParseError(DPIEError, ValueError):
    """A cell could not be parsed as a number."""


class ValidityError(DPIEError, ValueError):
    """Input data violates a structural invariant (e.g. treated external control)."""


class RankDeficiencyError(DPIEError, ValueError):
    """A design matrix does not have full column rank."""


class MatchError(DPIEError, ValueError):
    """Matching could not be completed, typically because the pool ran out."""


class StratumError(DPIEError, ValueError):
    """A cross-validation stratum holds fewer rows than folds."""


class CVError(DPIEError, RuntimeError):
    """Every cell of a cross-validation grid failed."""


class EstimationError(DPIEError, RuntimeError):
    """An auxiliary model (e.g. the inclusion model) failed to fit."""
