"""promptseg: input-level style prompts for a frozen segmentation model."""

__version__ = "0.1.0"
