"""Exception types shared across the package.

Everything raised on purpose derives from NelError so the CLI can map
"expected" failures to exit code 1 and argument problems to exit code 2.
"""


class NelError(Exception):
    """Base class for all errors raised deliberately by this package."""


class DimensionError(NelError):
    """A tensor does not have the required rank or axis sizes."""


class GeometryError(NelError):
    """Spatial geometry is invalid (non-divisible sizes, bad kernel/stride/pad)."""


class DTypeError(NelError):
    """Operands have mismatched or unsupported dtypes."""


class GraphStateError(NelError):
    """Autodiff graph misuse, e.g. calling backward twice on the same graph."""


class ContractError(NelError):
    """An argument violates a documented precondition (shape, range, value)."""


class DataFormatError(NelError):
    """A file or byte stream does not conform to its declared format."""


class CompatibilityError(NelError):
    """A checkpoint or dataset is well-formed but incompatible with the caller."""


class TrainingDiverged(NelError):
    """Loss became non-finite during training."""
