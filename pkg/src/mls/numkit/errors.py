class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateVectorError(ValueError):
    """A row that must be normalized has (near) zero norm."""
