class ConfigurationError(ValueError):
    """Invalid sizes, probabilities or schedule parameters."""


class DiagnosticsError(RuntimeError):
    """A diagnostic could not be computed (e.g. chain not uniquely ergodic)."""


class NumericError(RuntimeError):
    """A linear solve or decomposition failed."""


class TrainingAborted(RuntimeError):
    """Raised when a training run produces a non-finite TD error or gradient."""

    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step
