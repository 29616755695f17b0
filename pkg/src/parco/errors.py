"""Exception types shared across the package."""


class ParcoError(Exception):
    """Base class for contract and data errors raised by parco."""


class ShapeError(ParcoError, ValueError):
    """Operand extents do not agree."""


class TapeError(ParcoError, RuntimeError):
    """Misuse of a gradient tape (e.g. a second backward pass)."""


class NumericalError(ParcoError, FloatingPointError):
    """A NaN or infinity reached a place that requires finite values."""


class DataError(ParcoError, ValueError):
    """Malformed input data: unknown tokens, bad spans, bad files."""


class LexiconError(DataError, KeyError):
    """A token or phoneme is missing from the lexicon / inventory."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""
