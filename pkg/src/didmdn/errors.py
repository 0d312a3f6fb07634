"""Exception types shared across the package.

Class names double as the stable error identifiers printed by the CLI,
so they are spelled without an ``Error`` suffix.
"""


class DidmdnError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(DidmdnError):
    pass


class ShapeTooSmall(DidmdnError):
    pass


class TooSmall(DidmdnError):
    pass


class ChannelMismatch(DidmdnError):
    pass


class IndivisibleDims(DidmdnError):
    pass


class EmptyCleanDir(DidmdnError):
    pass


class WriteFailure(DidmdnError):
    pass


class MissingOutput(DidmdnError):
    pass


class EmptyManifest(DidmdnError):
    pass


class MissingLabelClass(DidmdnError):
    pass


class CropTooLarge(DidmdnError):
    pass


class DivergenceDetected(DidmdnError):
    """Training loss became non-finite.

    Carries the last good checkpoint (if any) so callers can salvage it.
    """

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class CorruptCheckpoint(DidmdnError):
    pass


class ConfigMismatch(DidmdnError):
    pass


class UntrainedModel(DidmdnError):
    pass
