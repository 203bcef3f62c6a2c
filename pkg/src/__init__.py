"""FocuSFT lab: bilevel fine-tuning, bidirectional context masking and attention-dilution diagnostics on a toy transformer."""

__version__ = "0.1.0"
