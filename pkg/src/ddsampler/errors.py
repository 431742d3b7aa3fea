"""Exception types shared across the toolkit."""


class SamplerError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SamplerError):
    """Invalid configuration or dimension mismatch at setup time."""


class ContractError(SamplerError):
    """An internal API contract was violated by the caller."""


class DomainError(SamplerError):
    """A value lies outside the state space or encoding range."""


class CapacityError(SamplerError):
    """Requested object exceeds a hard size limit (e.g. enumeration)."""


class ScheduleError(SamplerError):
    """A masking schedule is inconsistent with the current state."""


class BufferStateError(SamplerError):
    """Operation on a replay buffer in an invalid state (e.g. empty)."""


class TrainingError(SamplerError):
    """Non-finite quantity or other unrecoverable failure during training.

    ``index`` optionally carries the offending parameter index.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ProtocolError(SamplerError):
    """Remote energy protocol violation (handshake, ids, non-finite values)."""
