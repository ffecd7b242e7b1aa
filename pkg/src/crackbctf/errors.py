"""Exception types shared across the pipeline."""


class CrackError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(CrackError):
    """A file does not follow the expected binary or text layout."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        parts = [message]
        if offset is not None:
            parts.append(f"at byte offset {offset}")
        if path is not None:
            parts.append(f"in {path}")
        super().__init__(" ".join(parts))


class ParameterError(CrackError, ValueError):
    """An argument is outside its documented domain."""


class ContractError(CrackError, ValueError):
    """Inputs are individually valid but inconsistent with each other."""


class ConvergenceError(CrackError, RuntimeError):
    """An iterative procedure diverged."""
