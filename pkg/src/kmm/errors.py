class KMMError(ValueError):
    """Base class for invalid-input errors raised by this package."""


class FormatError(KMMError):
    """A file does not follow the declared on-disk format."""


class ValidationError(KMMError):
    """Data violates a type invariant (non-finite entries, bad padding, ...)."""


class ScanError(KMMError):
    """The selective scan produced a non-finite intermediate."""
