"""Exception hierarchy shared by every module."""


class DRDAError(Exception):
    pass


class ContractError(DRDAError, ValueError):
    """An argument violates an operation's precondition (shape, range, sign)."""


class NumericError(DRDAError, ArithmeticError):
    """A NaN or Inf appeared where a finite value is required."""


class DegenerateError(DRDAError, ValueError):
    """Input is well-formed but degenerate: zero-norm vector, empty class, zero row."""


class ParseError(DRDAError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(DRDAError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
