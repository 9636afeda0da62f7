"""Cost-optimal bidding and provisioning for synchronous SGD on spot and preemptible instances."""

__version__ = "0.1.0"

from spotsgd.errors import (  # noqa: F401
    DeadlineInfeasibleError, ErrorFloorError, InfeasibleBidError, InfeasibleError, QRangeError,
    SpotSgdError, TraceFormatError, TraceTruncationError,
)
from spotsgd.convergence import SgdConstants  # noqa: F401
from spotsgd.price_model import (  # noqa: F401
    EmpiricalPrice, PriceTrace, TruncatedGaussianPrice, UniformPrice, fit_empirical,
    load_trace, make_truncated_gaussian, make_uniform,
)
from spotsgd.runtime import RuntimeModel  # noqa: F401
from spotsgd.bidding import BidPlan, JobRequirements  # noqa: F401
