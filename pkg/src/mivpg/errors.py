"""Exception types raised across the library."""


class MivpgError(Exception):
    """Base class for all library errors."""


class ShapeError(MivpgError, ValueError):
    pass


class EmptyBagError(MivpgError, ValueError):
    """Raised when a bag (or an image group inside one) has no instances."""


class ConfigError(MivpgError, ValueError):
    pass


class ContractError(MivpgError, RuntimeError):
    """A caller violated an operation's precondition (e.g. non-scalar loss)."""


class TrainingError(MivpgError, RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class GenerationError(MivpgError, RuntimeError):
    pass
