"""Exception types raised across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its domain."""


class InfeasibleSplitError(ValueError):
    """No train/test partition can give every class a member on both sides."""

    def __init__(self, message, class_index=None):
        super().__init__(message)
        self.class_index = class_index


class BackboneUnavailableError(RuntimeError):
    """Pretrained backbone weights could not be loaded."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, epoch, batch_ids, components):
        self.epoch = epoch
        self.batch_ids = list(batch_ids)
        self.components = dict(components)
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {self.batch_ids}: {self.components}"
        )


class ConfigError(ValueError):
    """A run configuration is malformed or references missing inputs."""
