"""Exception hierarchy shared by every stlsnn module."""


class STLError(Exception):
    """Base class for all stlsnn errors."""


class ShapeError(STLError, ValueError):
    """Tensor or layer dimensions do not line up."""


class NumericError(STLError, ArithmeticError):
    """A NaN or infinity appeared in a state or gradient."""


class ConfigError(STLError, ValueError):
    """Invalid configuration value, key or network description."""


class UnsupportedSurrogateError(STLError, ValueError):
    """The surrogate kind has no forward (value) form."""


class ConsistencyError(STLError, ValueError):
    """Two objects that must agree (cache and net, paired files) do not."""


class EmptyInputError(STLError, ValueError):
    """An operation received zero samples or zero events."""


class RangeError(STLError, ValueError):
    """A value lies outside its admissible range."""


class FormatError(STLError, ValueError):
    """A binary or text file does not follow its declared format."""


class LengthError(FormatError):
    """A file or payload is shorter (or longer) than its header declares."""


class ParseError(FormatError):
    """A text line could not be parsed; carries the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class OrderError(ParseError):
    """Event timestamps decrease."""
