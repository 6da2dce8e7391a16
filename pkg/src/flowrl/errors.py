"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad shapes, bad hyperparameters, mismatched specs."""


class ContractError(ValueError):
    """A caller violated an API precondition (empty batch, wrong lengths, ...)."""


class TrainingError(RuntimeError):
    """Training produced non-finite values."""


class TrainingDivergedError(TrainingError):
    """Training aborted on a non-finite loss; carries the last good artifacts."""

    def __init__(self, message, artifacts=None):
        super().__init__(message)
        self.artifacts = artifacts


class IntegrationError(RuntimeError):
    """ODE integration hit a non-finite field value."""

    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


class OracleError(RuntimeError):
    """An exact oracle refused to run (e.g. path count guard exceeded)."""
