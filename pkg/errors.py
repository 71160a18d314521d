"""
Exception hierarchy for the CKA distillation toolkit.
All errors derive from ValueError so callers can catch them broadly.
"""


class CkaToolkitError(ValueError):
    """Base class for every toolkit error."""


class DimensionError(CkaToolkitError):
    """Shapes of the inputs do not fit the operation."""


class DegenerateInputError(CkaToolkitError):
    """A norm fell below the degenerate-norm threshold."""


class NonFiniteInputError(CkaToolkitError):
    """An input contains NaN or Inf."""


class PatchError(CkaToolkitError):
    """Spatial dims are not divisible by the patch size."""


class LabelCountError(CkaToolkitError):
    """Row or column label count does not match the matrix."""


class ConfigError(CkaToolkitError):
    """Invalid configuration value."""


class TrainingDivergedError(CkaToolkitError):
    """Loss or parameters became non-finite during training."""

    def __init__(self, message: str, epoch: int = None, seed: int = None):
        super().__init__(message)
        self.epoch = epoch
        self.seed = seed


class DumpFormatError(CkaToolkitError):
    """Base class for malformed FDMP files."""


class BadMagicError(DumpFormatError):
    pass


class BadVersionError(DumpFormatError):
    pass


class BadDtypeError(DumpFormatError):
    pass


class BadNdimError(DumpFormatError):
    pass


class LengthMismatchError(DumpFormatError):
    pass


class NonFiniteDumpError(DumpFormatError):
    pass
