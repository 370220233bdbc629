"""Exception hierarchy. CLI maps DataError -> exit 2, NumericError -> exit 3."""


class CmrError(Exception):
    pass


class ShapeError(CmrError, ValueError):
    pass


class CapacityError(CmrError, ValueError):
    pass


class GeometryError(CmrError):
    pass


class SymmetryError(GeometryError):
    pass


class DegenerateMotionError(CmrError):
    pass


class InvalidRotationError(CmrError, ValueError):
    pass


class NumericError(CmrError, ArithmeticError):
    pass


class DataError(CmrError):
    pass
