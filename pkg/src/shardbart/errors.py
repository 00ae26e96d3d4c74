"""Exception hierarchy shared across the package."""


class ShardBartError(Exception):
    """Base class for all package errors."""


class InputError(ShardBartError, ValueError):
    """Invalid argument or dataset."""


class ParseError(InputError):
    """A data file could not be parsed."""

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class StateError(ShardBartError, RuntimeError):
    """An object is not in a state that supports the requested operation."""


class MoveError(ShardBartError, ValueError):
    """A tree move targets an invalid node."""


class NoFeasibleAllocation(InputError):
    """The box constraints do not meet the sum hyperplane on the integer lattice."""


class ShardTooSmall(ShardBartError):
    """A shard holds fewer observations than the configured minimum."""

    def __init__(self, sizes, n_min):
        self.sizes = tuple(int(s) for s in sizes)
        self.n_min = n_min
        super().__init__(f"shard sizes {self.sizes} violate n_min={n_min}")


class NumericalError(ShardBartError, ArithmeticError):
    """A numerical routine failed to converge or hit a degenerate case."""
