"""Exception types raised across the package."""


class RegistrationError(ValueError):
    """Base class for all package errors."""


class EmptyCloud(RegistrationError):
    pass


class TooFewPoints(RegistrationError):
    pass


class AngleNearPi(RegistrationError):
    """Rotation too close to the cut locus for a well-defined logarithm."""


class ChannelMismatch(RegistrationError):
    pass


class ShapeMismatch(RegistrationError):
    pass


class EmptyDataset(RegistrationError):
    pass


class EmptyMesh(RegistrationError):
    pass


class UnsupportedFormat(RegistrationError):
    pass


class ParseError(RegistrationError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
