"""Exception types shared across the package."""


class DataFormatError(ValueError):
    """Input files or arrays do not satisfy the dataset contract."""


class NumericalError(RuntimeError):
    """A factorisation or quadrature failed beyond recovery."""
