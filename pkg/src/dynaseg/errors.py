"""Exception types shared across the package."""


class DynasegError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(DynasegError):
    """A file could not be parsed. Carries the offending path and 1-based line."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:"
        if line is not None:
            prefix += f"{line}:"
        super().__init__(f"{prefix} {message}" if prefix else message)


class ValidationError(DynasegError):
    """A value violates a domain invariant."""


class TrajectoryGapError(DynasegError):
    """A frame has no pose within the association tolerance."""


class DegenerateGeometryError(DynasegError):
    """A geometric estimation problem is rank-deficient."""


class PluginContractError(DynasegError):
    """A segmenter/tracker plugin returned a mask violating its contract."""
