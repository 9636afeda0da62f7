"""Per-iteration wall-clock model for synchronous SGD.

An iteration with m active workers lasts max(r_1..r_m) + overhead, where the
r_k are i.i.d. per-worker gradient times.  For exponential times the expected
maximum is H_m / rate (harmonic number), which the ``approx_log`` flag swaps
for log(m) / rate.
"""

import dataclasses
import math

import numpy as np
from scipy.special import digamma

__all__ = [
    "RuntimeModel", "harmonic", "expected_iteration_runtime",
    "expected_completion_time_preemption", "binomial_active_mean",
]

EULER_GAMMA = 0.5772156649015329
FAMILIES = ("exponential", "shifted-exponential", "deterministic")


@dataclasses.dataclass(frozen=True)
class RuntimeModel:
    family: str = "exponential"
    rate: float = 1.0
    shift: float = 0.0
    fixed_time: float = 1.0
    overhead: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown runtime family {self.family!r}; choose from {FAMILIES}")
        if self.family != "deterministic" and not self.rate > 0:
            raise ValueError("rate must be positive")
        if self.shift < 0 or self.overhead < 0 or self.fixed_time < 0:
            raise ValueError("shift, fixed_time and overhead must be non-negative")

    @classmethod
    def exponential(cls, rate, overhead=0.0):
        return cls("exponential", rate=rate, overhead=overhead)

    @classmethod
    def shifted_exponential(cls, rate, shift, overhead=0.0):
        return cls("shifted-exponential", rate=rate, shift=shift, overhead=overhead)

    @classmethod
    def deterministic(cls, time, overhead=0.0):
        return cls("deterministic", fixed_time=time, overhead=overhead)

    @property
    def family_code(self):
        return FAMILIES.index(self.family)

    def expected(self, m, approx_log=False):
        return expected_iteration_runtime(m, self, approx_log=approx_log)

    def sample(self, m, rng, size=None):
        """Draw iteration durations with ``m`` active workers."""
        shape = (m,) if size is None else (*np.atleast_1d(size), m)
        if self.family == "deterministic":
            r = np.full(shape, self.fixed_time)
        else:
            r = rng.exponential(1.0 / self.rate, size=shape) + (
                self.shift if self.family == "shifted-exponential" else 0.0)
        return r.max(axis=-1) + self.overhead

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values):
        kw = {}
        if "runtime_family" in values:
            kw["family"] = values["runtime_family"]
        for key, field in (("rate", "rate"), ("shift", "shift"),
                           ("fixed_time", "fixed_time"), ("overhead", "overhead")):
            if key in values:
                kw[field] = float(values[key])
        return cls(**kw)

    def to_config(self):
        return (f"runtime_family = {self.family}\nrate = {self.rate!r}\nshift = {self.shift!r}\n"
                f"fixed_time = {self.fixed_time!r}\noverhead = {self.overhead!r}\n")


def harmonic(m):
    """H_m; real arguments use psi(m + 1) + Euler's gamma."""
    if float(m).is_integer() and m < 10_000:
        return math.fsum(1.0 / k for k in range(1, int(m) + 1))
    return float(digamma(m + 1.0) + EULER_GAMMA)


def expected_iteration_runtime(m, model: RuntimeModel, approx_log=False) -> float:
    """E[R(m)]: expected duration of one iteration with ``m`` active workers."""
    if m < 1:
        raise ValueError(f"need at least one active worker, got m={m}")
    if model.family == "deterministic":
        return model.fixed_time + model.overhead
    h = math.log(m) if approx_log else harmonic(m)
    base = model.shift if model.family == "shifted-exponential" else 0.0
    return base + h / model.rate + model.overhead


def binomial_active_mean(n, q):
    """E[y | y > 0] for y ~ Binomial(n, 1 - q)."""
    if not 0 <= q < 1:
        raise ValueError("preemption probability must lie in [0, 1)")
    return n * (1.0 - q) / (1.0 - q ** n)


def expected_completion_time_preemption(J, n, q, model: RuntimeModel, active=None,
                                        approx_log=False) -> float:
    """Expected wall-clock time for J iterations when each worker is preempted w.p. q.

    ``active`` optionally gives the expected active count per iteration (scalar
    or length-J sequence); it defaults to the conditional binomial mean.
    """
    if not 0 <= q < 1:
        raise ValueError("preemption probability must lie in [0, 1)")
    if n < 1 or J < 1:
        raise ValueError("need n >= 1 and J >= 1")
    if active is None:
        active = binomial_active_mean(n, q)
    ybar = np.broadcast_to(np.asarray(active, dtype=float), (J,))
    total = math.fsum(expected_iteration_runtime(max(1.0, y), model, approx_log) for y in ybar)
    return total / (1.0 - q ** n)
