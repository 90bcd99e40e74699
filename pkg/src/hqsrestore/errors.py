"""Exception types raised by the library."""


class InputError(ValueError):
    """An argument has the wrong shape, range or type."""


class ConfigurationError(ValueError):
    """A solver or training configuration cannot be satisfied."""


class InvariantError(RuntimeError):
    """An internal consistency check failed (tape/model mismatch, bad plugin output)."""


class NumericalError(ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class ModelFormatError(Exception):
    """Base class for model-file decoding failures."""


class BadMagicError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    def __init__(self, found, supported):
        super().__init__(
            f"model file version {found} is not supported (this build reads version {supported})"
        )
        self.found = found
        self.supported = supported


class ChecksumError(ModelFormatError):
    pass


class HeaderInconsistencyError(ModelFormatError):
    pass
