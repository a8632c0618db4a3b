"""Exception hierarchy shared by all engine modules."""


class AnorouteError(Exception):
    """Base class for all engine errors."""


class FormatError(AnorouteError):
    """Malformed or corrupt AVAF container (bad magic, truncation, ...)."""


class ValidationError(AnorouteError):
    """Well-formed file whose contents violate a dataset/model invariant."""


class ConfigError(ValidationError):
    """Bad key or value in a run configuration file."""


class NumericalAbort(AnorouteError):
    """Training hit a non-finite loss; carries the offending batch index."""

    def __init__(self, message, epoch=None, batch_index=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
