"""Exception types shared across the package."""


class BodySplatError(Exception):
    """Base class for errors raised by this package."""


class DegenerateCovarianceError(BodySplatError):
    """Covariance matrix is numerically singular (condition number too large)."""


class ParseError(BodySplatError):
    """A file could not be parsed. Carries the offending location."""

    def __init__(self, message, path=None, line=None, offset=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if line is not None:
            loc.append(f"line {line}")
        if offset is not None:
            loc.append(f"byte {offset}")
        prefix = ":".join(loc)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.offset = offset


class ValidationError(BodySplatError):
    """Data violates a structural invariant. Names the violated rule."""


class SamplingError(BodySplatError):
    """Contrastive sampling has no eligible candidates for some part."""
