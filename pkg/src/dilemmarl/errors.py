"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A run was configured with incompatible or unknown settings."""


class InvalidProposalError(ValueError):
    """A proposal lies outside ``[0, q]``."""


class InternalError(RuntimeError):
    """An invariant that the code itself is responsible for was violated."""


class StepAborted(RuntimeError):
    """A training step produced a non-finite advantage or gradient."""

    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step
