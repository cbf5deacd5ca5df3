"""Error types shared across the package.

ContractError means the caller violated a documented precondition (bad
shapes, bad config, malformed files). NumericError means a computation
produced NaN/Inf or was aborted for numerical reasons. The CLI maps them
to exit codes 1 and 2 respectively.
"""


class ContractError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass
