"""Exception hierarchy shared across the simulator."""


class FedQuantError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(FedQuantError):
    """Tensor dimensions do not line up."""


class NumericError(FedQuantError):
    """Non-finite values appeared where finite ones are required."""


class ConfigError(FedQuantError):
    """Invalid or inconsistent configuration."""


class DegenerateTensorError(FedQuantError):
    """A statistic (stddev, kurtosis) is undefined for a constant tensor."""


class AggregationError(FedQuantError):
    """Client updates cannot be combined."""


class UsageError(FedQuantError):
    """An API was called out of protocol (e.g. a backward cache reused)."""


class DivergedError(FedQuantError):
    """Training produced a non-finite loss or update.

    Carries the round index and, when known, the offending client id so a
    failed simulation can be pinned to its origin.
    """

    def __init__(self, message: str, round_idx: int | None = None,
                 client_id: int | None = None):
        super().__init__(message)
        self.round_idx = round_idx
        self.client_id = client_id
