"""Network self-organization, net fragments and maplet matching on small sheets."""

__version__ = "0.1.0"

from .errors import (DegenerateGeometryError, DegenerateUnitError, FormatError, InvalidArgument,
                     NetfragError, NumericalFailure)
from .rng import RngStream
from .substrate import ActivityState, Sheet, WeightField, read_snapshot, write_snapshot

__all__ = [
    "ActivityState", "DegenerateGeometryError", "DegenerateUnitError", "FormatError", "InvalidArgument",
    "NetfragError", "NumericalFailure", "RngStream", "Sheet", "WeightField", "read_snapshot",
    "write_snapshot", "__version__",
]
