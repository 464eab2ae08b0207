"""Exception hierarchy shared across the package."""


class GtrError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GtrError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(GtrError):
    """A call violated an operation's precondition."""


class VocabularyError(GtrError):
    """A token id or token string is outside the known vocabulary."""


class ParseError(GtrError):
    """A text input (config file, embedding file) is malformed."""


class FormatError(GtrError):
    """A binary file (clip or checkpoint) is malformed or truncated."""
