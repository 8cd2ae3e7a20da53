"""Exception taxonomy shared across the package.

Everything raised on purpose derives from TrajSegError so the CLI can catch
one type, print the message, and exit nonzero without a traceback.
"""


class TrajSegError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ShapeError(TrajSegError):
    """Array arguments whose shapes cannot be reconciled."""


class InputError(TrajSegError):
    """Structurally valid arrays/values that violate an op's contract."""


class NumericError(TrajSegError):
    """Non-finite values where finite ones are required (losses, grad checks)."""


class TokenizationError(TrajSegError):
    """Text containing words outside the closed vocabulary."""


class CapacityError(TrajSegError):
    """Sequences exceeding a configured maximum length."""


class StateError(TrajSegError):
    """Operations invalid for the current memory-bank / pipeline state."""


class GenerationError(TrajSegError):
    """Scene sampling could not satisfy its constraints within bounded retries."""


class ConfigError(TrajSegError):
    """Unknown keys, malformed values, or missing files in run configuration."""


class FormatError(TrajSegError):
    """Malformed serialized artifacts: RLE masks, checkpoints, manifests."""
