"""
Exception hierarchy shared by the library, the CLI and the HTTP API.

Each class carries the process exit code the CLI uses for it.
"""


class AcoeError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1
    http_status = 500


class ValidationError(AcoeError):
    """Invalid model, distribution, policy, file or config."""

    exit_code = 2
    http_status = 400


class ShapeMismatchError(ValidationError):
    """Two objects that must share state/action shapes do not."""


class ConfigError(ValidationError):
    """Experiment config failed validation; the message carries the JSON path."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class NoiseGridError(ValidationError):
    """An observed noise residual is not on the declared noise grid."""

    def __init__(self, step, residual):
        super().__init__(f"residual {residual} at step {step} is not on the noise grid")
        self.step = step
        self.residual = residual


class ConvergenceError(AcoeError):
    """An iteration stopped at its cap without meeting its tolerance."""

    exit_code = 3
    http_status = 422

    def __init__(self, message, residual=float('nan'), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class MultichainError(ConvergenceError):
    """A policy kernel has more than one closed class."""

    def __init__(self, classes, policy=None):
        first, second = classes[0], classes[1]
        where = f" under policy {list(policy)}" if policy is not None else ""
        super().__init__(f"multichain{where}: closed classes {first} and {second}")
        self.classes = classes
        self.policy = policy


class PreconditionError(ConvergenceError):
    """solve_acoe was called on a model without an ergodicity certificate."""


class BudgetError(AcoeError):
    """Policy enumeration would exceed the configured budget."""

    exit_code = 4
    http_status = 413

    def __init__(self, requested, cap):
        super().__init__(f"policy enumeration needs {requested} policies, budget is {cap}")
        self.requested = requested
        self.cap = cap


class BlockError(AcoeError):
    """A failure inside an adaptive run, tagged with the block where it happened."""

    def __init__(self, block, cause):
        super().__init__(f"block {block}: {cause}")
        self.block = block
        self.cause = cause
        self.exit_code = getattr(cause, 'exit_code', 1)
        self.http_status = getattr(cause, 'http_status', 500)
