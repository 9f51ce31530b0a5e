class FormatError(ValueError):
    """A binary file does not match its expected layout (magic, CRC, truncation)."""


class KindMismatchError(FormatError):
    """A checkpoint holds a different artifact kind than the caller expected."""


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""
