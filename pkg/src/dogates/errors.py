"""Exception types shared across the package."""


class DogatesError(Exception):
    """Base class for recoverable estimation errors.

    The multi-split driver catches this class (and nothing broader):
    a split that raises a ``DogatesError`` is recorded and skipped,
    anything else is a programming error and propagates.
    """


class OverlapError(DogatesError):
    """Overlap trimming removed an entire treatment arm."""


class NoHeterogeneityError(DogatesError):
    """All scores identical; quantile grouping is degenerate."""


class NoTreatmentVariationError(DogatesError):
    """A group has zero residual treatment variation (sum of v-hat^2 is 0)."""


class DataValidationError(DogatesError):
    """Input data violates a dataset invariant."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
