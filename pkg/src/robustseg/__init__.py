"""Cross-prompt attacks and singular-value defenses on a toy promptable segmenter."""

__version__ = "0.1.0"
