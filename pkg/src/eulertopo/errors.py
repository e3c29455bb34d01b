"""Exception hierarchy.

Two families: bad input (``InvalidParameter``, CLI exit code 2) and
numerical failures (``NumericalError``, CLI exit code 3).
"""


class EulerTopoError(Exception):
    pass


class InvalidParameter(EulerTopoError, ValueError):
    """Input outside the domain of the model (e.g. |m| = 0 or 2)."""


class NumericalError(EulerTopoError, ArithmeticError):
    pass


class DegenerateVector(NumericalError):
    pass


class GaugeObstruction(NumericalError):
    pass


class IllConditionedPlaquette(NumericalError):
    pass


class ZeroLink(NumericalError):
    pass


class PathTooCoarse(NumericalError):
    pass


class AmbiguousRank(NumericalError):
    pass


class UnwrapFailure(NumericalError):
    pass


class NotFlattened(NumericalError):
    pass


class BoundaryNotFixed(NumericalError):
    pass


class OpenCurve(NumericalError):
    pass


class CurvesTooClose(NumericalError):
    pass


class RamanInvalid(NumericalError):
    pass


class Infeasible(NumericalError):
    pass


class GapClosed(NumericalError):
    pass


class OptimizerStalled(NumericalError):
    pass


class DegenerateTop(NumericalError):
    pass
