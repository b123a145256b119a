"""Exception types shared across the package."""


class RelposError(Exception):
    """Base class for every error raised by this package."""


class NotPerfectSquareError(RelposError):
    """Patch count has no integer square root."""


class TooSmallError(RelposError):
    """Patch count below the supported minimum of 9."""


class IndexOutOfRangeError(RelposError):
    """Linear index or lattice coordinate outside the grid."""


class NonPositiveUnitError(RelposError):
    """Unit distance must be strictly positive."""


class MissingParameterError(RelposError):
    """A positional mode needs a parameter that was not supplied."""


class ShapeMismatchError(RelposError):
    """Array shapes incompatible with the requested operation."""


class NonScalarLossError(RelposError):
    """backward() was handed a tensor that is not scalar-shaped."""


class LabelOutOfRangeError(RelposError):
    """Class label outside [0, classes)."""


class EmptyDatasetError(RelposError):
    """Operation requires at least one example."""


class InvalidGeometryError(RelposError):
    """Synthetic-task geometry incompatible with the patch grid."""


class ParseError(RelposError):
    """Malformed on-disk data; message carries the failure location."""


class ConfigError(RelposError):
    """Run configuration missing, malformed, or self-contradictory."""
