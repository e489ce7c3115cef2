"""Exception hierarchy shared by every module in the package."""


class RirFieldError(Exception):
    """Base class for all errors raised by this package."""


# rir-core
class InvalidImpulseResponse(RirFieldError, ValueError):
    pass


class ZeroEnergy(RirFieldError, ValueError):
    pass


class BandOutOfRange(RirFieldError, ValueError):
    pass


class InsufficientDecay(RirFieldError, ValueError):
    pass


class RateMismatch(RirFieldError, ValueError):
    pass


# geometry
class MalformedMesh(RirFieldError, ValueError):
    pass


class EmptyMesh(RirFieldError, ValueError):
    pass


class InfeasibleSampleCount(RirFieldError, ValueError):
    pass


# simulator
class CoincidentEndpoints(RirFieldError, ValueError):
    pass


class OutOfRoom(RirFieldError, ValueError):
    pass


class IoError(RirFieldError, OSError):
    pass


# retrieval
class EmptyIndex(RirFieldError, ValueError):
    pass


class DimensionMismatch(RirFieldError, ValueError):
    pass


class NotEnoughRooms(RirFieldError, ValueError):
    pass


class NoGeometryAvailable(RirFieldError, LookupError):
    pass


# nafield / training
class InvalidInput(RirFieldError, ValueError):
    pass


class ShapeError(RirFieldError, ValueError):
    pass


class NumericalError(RirFieldError, FloatingPointError):
    pass


class RankError(RirFieldError, ValueError):
    pass


class MissingGeometry(RirFieldError, LookupError):
    pass
