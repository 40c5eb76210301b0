"""
Exception hierarchy shared by every module.

Each class carries the exit code the CLI returns when it escapes a command.
"""


class StyleTSEError(Exception):
    """Base class for all expected failures."""

    exit_code = 1


class ConfigError(StyleTSEError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(StyleTSEError):
    """Bad input data: files, manifests, records, clues."""

    exit_code = 3


class FormatError(DataError):
    """A file does not have the expected format."""


class ValidationError(DataError):
    """A record or spec violates a schema or constraint."""


class PairingExhausted(DataError):
    """No candidate utterance satisfies the pairing constraints."""


class NoGatedBlocks(DataError):
    """Loudness is undefined because every gating block was rejected."""


class InputError(DataError):
    """An argument is outside the operation's preconditions."""


class NumericError(StyleTSEError):
    """Non-finite values or failed numeric checks."""

    exit_code = 4


class DimensionError(NumericError):
    """Tensor shapes do not line up."""
