"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class NumericError(RuntimeError):
    """A numerical routine failed (non-convergence, NaN, overflow)."""


class TrainingAbort(NumericError):
    """Training hit a non-finite loss and stopped."""

    def __init__(self, step: int, seed: int):
        super().__init__(f"non-finite loss at step {step} (seed {seed})")
        self.step = step
        self.seed = seed


class CorpusError(ValueError):
    """Corpus generation or parsing failed."""


class UsageError(ValueError):
    """Bad command-line usage (maps to exit code 2)."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or incompatible with the model."""
