"""Exception types shared across the package."""


class BlockreconError(Exception):
    """Base class for package-specific failures."""


class FormatError(BlockreconError):
    """A file, manifest, or wire payload is malformed."""


class NumericError(BlockreconError):
    """Non-finite values appeared where finite algebra was required."""
