"""Exception types shared across the package."""


class EhrseqError(Exception):
    """Base class for all package errors."""


class ManifestError(EhrseqError):
    """A dataset manifest is malformed or references missing files/columns.

    ``field`` names the offending manifest entry.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ConfigError(EhrseqError):
    """User-supplied configuration is invalid or internally inconsistent."""


class ShapeError(EhrseqError):
    """Tensor or sequence dimensions do not line up."""


class LabelError(EhrseqError):
    """A label value is outside its task's admissible range."""


class StateError(EhrseqError):
    """An operation was invoked out of order (e.g. backward before forward)."""


class NumericsError(EhrseqError):
    """Non-finite values encountered in checked numeric mode."""


class MetricUndefined(EhrseqError):
    """A metric has no defined value for the given inputs (e.g. one-class AUPRC)."""


class CohortFilterReject(EhrseqError):
    """Signal that a record fails a cohort/canonicalization rule and is dropped."""
