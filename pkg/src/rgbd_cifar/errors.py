"""Exception hierarchy shared by the dataset, pipeline and training code.

Argument errors are plain ``ValueError``; everything below signals a problem
with data, an external process or a training run.
"""


class RGBDError(Exception):
    """Base class for all package errors."""


class MalformedFileError(RGBDError):
    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class CorruptRecordError(RGBDError):
    def __init__(self, message, record_index):
        super().__init__(message)
        self.record_index = record_index


class IntegrityError(RGBDError):
    """Checksum or manifest mismatch."""


class ValidationError(RGBDError, ValueError):
    """Numeric content failed validation (e.g. NaN/inf)."""


class ProviderError(RGBDError):
    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (image index {index})")
        self.index = index


class ProviderPending(ProviderError):
    """External provider inputs were exported but outputs are not there yet."""


class DivergenceError(RGBDError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
