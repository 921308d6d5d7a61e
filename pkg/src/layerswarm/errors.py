"""Exception hierarchy shared by every layerswarm module."""


class LayerswarmError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(LayerswarmError, ValueError):
    pass


class NoDataError(LayerswarmError):
    """A metric was requested for something with no observations yet."""


class NoCandidatesError(LayerswarmError):
    pass


class InvariantViolationError(LayerswarmError):
    pass


class TransferError(LayerswarmError):
    """A block fetch failed (timeout, disconnect, peer error)."""


class LayerUnavailableError(LayerswarmError):
    """All peers are exhausted and the registry cannot supply the layer."""


class NotFoundError(LayerswarmError):
    pass


class UpstreamUnavailableError(LayerswarmError):
    pass


class ScenarioError(LayerswarmError, ValueError):
    """A scenario file failed to parse or validate."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
