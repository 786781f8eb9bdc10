"""Error taxonomy shared across the package.

Three stable categories, mirrored by the CLI exit codes: configuration
problems (bad shapes, invalid hyperparameters, impossible requests),
usage problems (valid objects combined the wrong way at call time), and
file-format problems when decoding images or checkpoints.
"""


class ConfigurationError(ValueError):
    """A config value or shape combination that can never work."""


class UsageError(ValueError):
    """A call that violates an operation's contract (e.g. non-scalar loss)."""


class FormatError(ValueError):
    """Malformed on-disk data; message carries the byte offset when known."""
