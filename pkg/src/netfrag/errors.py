"""Exception types shared by every engine."""


class NetfragError(Exception):
    pass


class InvalidArgument(NetfragError, ValueError):
    pass


class FormatError(NetfragError):
    pass


class DegenerateUnitError(NetfragError):
    """A unit has no incoming weight, so it cannot be normalized or located."""

    def __init__(self, unit, message=None):
        self.unit = int(unit)
        super().__init__(message or f"unit {self.unit} has zero incoming weight")


class DegenerateGeometryError(NetfragError):
    pass


class NumericalFailure(NetfragError):
    def __init__(self, epoch, message=None):
        self.epoch = int(epoch)
        super().__init__(message or f"non-finite weights at epoch {self.epoch}")
