class DCSError(Exception):
    """Base class for errors raised by dcsreid."""


class DimensionError(DCSError, ValueError):
    pass


class ContractError(DCSError, ValueError):
    pass


class ParameterError(DCSError, ValueError):
    pass


class DivergenceError(DCSError, ArithmeticError):
    """A loss or bound diverged (NaN/Inf or log of a zero probability)."""


class CheckpointError(DCSError, ValueError):
    pass
