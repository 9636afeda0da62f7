"""Exception types shared across the package.

Each infeasibility class carries the CLI exit code it maps to, so the command
line layer can translate errors without a lookup table of its own.
"""


class SpotSgdError(Exception):
    exit_code = 7


class InfeasibleError(SpotSgdError, ValueError):
    """A plan or requirement cannot be met."""

    exit_code = 3


class InfeasibleBidError(InfeasibleError):
    """The bid is at or below every possible price, so F(b) = 0."""

    def __init__(self, bid, message=None):
        self.bid = bid
        super().__init__(message or f"bid {bid!r} is never accepted (F(b) = 0); "
                                    "completion time is unbounded")


class DeadlineInfeasibleError(InfeasibleError):
    def __init__(self, message, min_deadline=None, partial=None):
        self.min_deadline = min_deadline
        self.partial = partial
        super().__init__(message)


class ErrorFloorError(InfeasibleError):
    """The error target is below what the configuration can ever reach."""

    exit_code = 4

    def __init__(self, message, floor=None):
        self.floor = floor
        super().__init__(message)


class QRangeError(InfeasibleError):
    """Q(eps) falls outside (1/n, 1/n1]; two-bid closed form does not apply."""

    exit_code = 5

    def __init__(self, message, q=None, lower=None, upper=None, feasible_iterations=None):
        self.q = q
        self.lower = lower
        self.upper = upper
        self.feasible_iterations = feasible_iterations
        super().__init__(message)


class TraceTruncationError(SpotSgdError):
    """A replayed price trace ended before the job finished."""

    exit_code = 6

    def __init__(self, message, partial=None):
        self.partial = partial
        super().__init__(message)


class DivergenceError(SpotSgdError):
    pass


class TraceFormatError(SpotSgdError, ValueError):
    exit_code = 2

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
