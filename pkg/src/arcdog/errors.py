"""Exception hierarchy.

The CLI maps each family onto an exit code: usage/config errors exit 1,
data errors exit 2, numerical failures exit 3.
"""


class ArcdogError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(ArcdogError, ValueError):
    exit_code = 1
    kind = "config"


class DataError(ArcdogError, ValueError):
    exit_code = 2
    kind = "data"


class NumericalError(ArcdogError, ArithmeticError):
    exit_code = 3
    kind = "numerical"


class ShapeError(ArcdogError, ValueError):
    exit_code = 1
    kind = "shape"


class RankDeficientError(NumericalError):
    kind = "rank-deficient"


class NonFiniteError(NumericalError):
    kind = "non-finite"
