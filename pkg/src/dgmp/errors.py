"""Exception hierarchy shared by every module."""


class DGMPError(Exception):
    """Base class for library errors."""


class DimensionMismatch(DGMPError, ValueError):
    pass


# optimizer parameter/gradient disagreement; same failure mode as above
ShapeMismatch = DimensionMismatch


class NotPositiveDefinite(DGMPError, ArithmeticError):
    pass


class ZeroVector(DGMPError, ArithmeticError):
    pass


class InvalidInput(DGMPError, ValueError):
    pass


class UnknownOp(DGMPError, KeyError):
    pass


class NoRelevant(DGMPError, ValueError):
    """A retrieval query has no relevant item in the gallery."""


class DegenerateBatch(DGMPError, ValueError):
    """A triplet batch lacks a positive or a negative for some anchor."""


class NotEnoughClasses(DGMPError, ValueError):
    pass


class FileFormatError(DGMPError, ValueError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class ConfigError(DGMPError, ValueError):
    pass
