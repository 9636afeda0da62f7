"""Spot-price distributions on a bounded support.

Three families are supported: uniform, Gaussian truncated to the support, and
an empirical step CDF fitted to a price trace.  All models are immutable and
vectorized over numpy inputs.
"""

import csv
import dataclasses
import datetime
import math
from typing import ClassVar, Sequence

import numpy as np

from spotsgd import _normal
from spotsgd.errors import InfeasibleBidError, TraceFormatError

__all__ = [
    "PriceModel", "UniformPrice", "TruncatedGaussianPrice", "EmpiricalPrice",
    "PriceTrace", "make_uniform", "make_truncated_gaussian", "fit_empirical",
    "mean_price_below", "sample_price", "load_trace", "model_from_dict",
]

# p_lower of an empirical model sits this far (relative) below the smallest sample
EMPIRICAL_FLOOR_OFFSET = 1e-9


class PriceModel:
    """Common interface; subclasses fill in the distribution-specific pieces."""

    kind: ClassVar[str] = ""
    lower: float
    upper: float

    def cdf(self, p):
        raise NotImplementedError

    def pdf(self, p):
        raise NotImplementedError

    def quantile(self, u):
        raise NotImplementedError

    def partial_expectation(self, b):
        """Return the integral of p f(p) over [lower, b]."""
        raise NotImplementedError

    def mean(self):
        return float(self.partial_expectation(self.upper))

    def to_dict(self):
        raise NotImplementedError

    def kernel_spec(self):
        """(kind code, float parameters, sample array) consumed by the simulator kernel."""
        raise NotImplementedError

    def summary(self):
        deciles = [float(self.quantile(k / 10)) for k in range(1, 10)]
        return {
            "kind": self.kind,
            "lower": self.lower,
            "upper": self.upper,
            "mean": self.mean(),
            "median": float(self.quantile(0.5)),
            "deciles": deciles,
        }


def _ret(a):
    a = np.asarray(a)
    return a if a.ndim else float(a)


def _check_bounds(lower, upper):
    if not (math.isfinite(lower) and math.isfinite(upper)):
        raise ValueError("price bounds must be finite")
    if lower >= upper:
        raise ValueError(f"lower bound {lower} must be below upper bound {upper}")


@dataclasses.dataclass(frozen=True)
class UniformPrice(PriceModel):
    lower: float
    upper: float
    kind: ClassVar[str] = "uniform"

    def __post_init__(self):
        _check_bounds(self.lower, self.upper)

    @property
    def width(self):
        return self.upper - self.lower

    def cdf(self, p):
        return _ret(np.clip((np.asarray(p, dtype=float) - self.lower) / self.width, 0.0, 1.0))

    def pdf(self, p):
        p = np.asarray(p, dtype=float)
        return _ret(np.where((p >= self.lower) & (p <= self.upper), 1.0 / self.width, 0.0))

    def quantile(self, u):
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        return _ret(self.lower + u * self.width)

    def partial_expectation(self, b):
        b = np.clip(np.asarray(b, dtype=float), self.lower, self.upper)
        return _ret((b * b - self.lower * self.lower) / (2.0 * self.width))

    def to_dict(self):
        return {"kind": self.kind, "lower": self.lower, "upper": self.upper}

    def kernel_spec(self):
        return 0, np.array([self.lower, self.upper], dtype=float), np.zeros(1)


@dataclasses.dataclass(frozen=True)
class TruncatedGaussianPrice(PriceModel):
    """N(mean, variance) restricted to [lower, upper] and renormalized."""

    mu: float
    variance: float
    lower: float
    upper: float
    kind: ClassVar[str] = "truncated-gaussian"

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"variance must be positive, got {self.variance}")
        _check_bounds(self.lower, self.upper)
        sd = math.sqrt(self.variance)
        za = (self.lower - self.mu) / sd
        zb = (self.upper - self.mu) / sd
        # mirrored windows keep the subtraction in the lower tail
        mirrored = za > 0.0
        if mirrored:
            ca, cb = _normal.norm_cdf(-zb), _normal.norm_cdf(-za)
        else:
            ca, cb = _normal.norm_cdf(za), _normal.norm_cdf(zb)
        if not cb > ca:
            raise ValueError("truncation window carries no probability mass")
        object.__setattr__(self, "_sd", sd)
        object.__setattr__(self, "_za", za)
        object.__setattr__(self, "_zb", zb)
        object.__setattr__(self, "_ca", ca)
        object.__setattr__(self, "_cb", cb)
        object.__setattr__(self, "_mirrored", mirrored)

    @property
    def sd(self):
        return self._sd

    @property
    def mass(self):
        return self._cb - self._ca

    def _cdf_scalar(self, p):
        if p <= self.lower:
            return 0.0
        if p >= self.upper:
            return 1.0
        z = (p - self.mu) / self._sd
        if self._mirrored:
            return (self._cb - _normal.norm_cdf(-z)) / (self._cb - self._ca)
        return (_normal.norm_cdf(z) - self._ca) / (self._cb - self._ca)

    def cdf(self, p):
        p = np.asarray(p, dtype=float)
        out = np.vectorize(self._cdf_scalar, otypes=[float])(p)
        return _ret(out)

    def pdf(self, p):
        p = np.asarray(p, dtype=float)
        z = (p - self.mu) / self._sd
        dens = np.exp(-z * z / 2.0) / (_normal._SQRT_2PI * self._sd * self.mass)
        return _ret(np.where((p >= self.lower) & (p <= self.upper), dens, 0.0))

    def quantile(self, u):
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        out = _normal.truncnorm_ppf_v(u, self.mu, self._sd, self._za, self._zb,
                                       self._ca, self._cb, self.lower, self.upper)
        return _ret(out)

    def partial_expectation(self, b):
        b = np.clip(np.asarray(b, dtype=float), self.lower, self.upper)
        za = self._za
        zb = (b - self.mu) / self._sd
        cdf_b = np.asarray(self.cdf(b)) * self.mass
        phi = lambda z: np.exp(-z * z / 2.0) / _normal._SQRT_2PI  # noqa: E731
        out = (self.mu * cdf_b - self._sd * (phi(zb) - phi(za))) / self.mass
        return _ret(out)

    def to_dict(self):
        return {"kind": self.kind, "mean": self.mu, "variance": self.variance,
                "lower": self.lower, "upper": self.upper}

    def kernel_spec(self):
        params = np.array([self.mu, self._sd, self._za, self._zb, self._ca, self._cb,
                           self.lower, self.upper], dtype=float)
        return 2, params, np.zeros(1)


@dataclasses.dataclass(frozen=True, eq=False)
class EmpiricalPrice(PriceModel):
    """Step CDF F(p) = #(samples <= p) / N over a sorted sample array."""

    samples: np.ndarray
    lower: float
    upper: float
    kind: ClassVar[str] = "empirical-step"

    def __post_init__(self):
        s = np.sort(np.asarray(self.samples, dtype=float))
        if s.size == 0:
            raise ValueError("empirical model needs at least one sample")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        _check_bounds(self.lower, self.upper)

    @property
    def n(self):
        return self.samples.size

    def cdf(self, p):
        p = np.asarray(p, dtype=float)
        out = np.searchsorted(self.samples, p, side="right") / self.n
        return _ret(out)

    def pdf(self, p):
        raise ValueError("an empirical step CDF has no density")

    def quantile(self, u):
        # smallest sample s with F(s) >= u, i.e. the ceil(u N)-th order statistic
        u = np.asarray(u, dtype=float)
        idx = np.clip(np.ceil(u * self.n).astype(np.int64) - 1, 0, self.n - 1)
        out = self.samples[idx]
        return _ret(out)

    def partial_expectation(self, b):
        b = np.asarray(b, dtype=float)
        csum = np.concatenate([[0.0], np.cumsum(self.samples)])
        out = csum[np.searchsorted(self.samples, b, side="right")] / self.n
        return _ret(out)

    def to_dict(self):
        return {"kind": self.kind, "lower": self.lower, "upper": self.upper,
                "samples": self.samples.tolist()}

    def kernel_spec(self):
        return 1, np.array([self.lower, self.upper], dtype=float), np.ascontiguousarray(self.samples)


@dataclasses.dataclass(frozen=True, eq=False)
class PriceTrace:
    """Time-ordered (epoch seconds, price) records."""

    timestamps: np.ndarray
    prices: np.ndarray
    instance_type: str = ""
    zone: str = ""

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=float)
        p = np.asarray(self.prices, dtype=float)
        if t.shape != p.shape or t.ndim != 1:
            raise ValueError("timestamps and prices must be 1-D arrays of equal length")
        if t.size and np.any(np.diff(t) <= 0):
            raise ValueError("trace timestamps must be strictly increasing")
        if np.any(p <= 0) or not np.all(np.isfinite(p)):
            raise ValueError("trace prices must be finite and strictly positive")
        t.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "prices", p)

    def __len__(self):
        return self.prices.size

    @property
    def duration(self):
        return float(self.timestamps[-1] - self.timestamps[0]) if len(self) else 0.0


def _parse_timestamp(text):
    text = text.strip()
    try:
        return float(int(text))
    except ValueError:
        pass
    ts = datetime.datetime.fromisoformat(text.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=datetime.timezone.utc)
    return ts.timestamp()


def load_trace(path, instance_type="", zone=""):
    """Read a ``timestamp,price`` CSV; rows are sorted, duplicates rejected."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["timestamp", "price"]:
            raise TraceFormatError("expected header 'timestamp,price'", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise TraceFormatError(f"expected 2 fields, got {len(row)}", line=lineno)
            try:
                ts = _parse_timestamp(row[0])
                price = float(row[1])
            except ValueError as exc:
                raise TraceFormatError(f"cannot parse row {row!r}: {exc}", line=lineno) from None
            if not (math.isfinite(price) and price > 0):
                raise TraceFormatError(f"price must be positive, got {row[1]!r}", line=lineno)
            records.append((ts, price, lineno))
    if not records:
        raise TraceFormatError("trace contains no records")
    records.sort(key=lambda r: r[0])
    for prev, cur in zip(records, records[1:]):
        if prev[0] == cur[0]:
            raise TraceFormatError(f"duplicate timestamp {cur[0]} (also on line {prev[2]})",
                                   line=cur[2])
    return PriceTrace(np.array([r[0] for r in records]), np.array([r[1] for r in records]),
                      instance_type=instance_type, zone=zone)


def make_uniform(lower, upper):
    return UniformPrice(float(lower), float(upper))


def make_truncated_gaussian(mean, variance, lower, upper, *, as_std=False):
    """Gaussian price model; ``as_std`` reads the second argument as a standard deviation."""
    if as_std:
        if not variance > 0:
            raise ValueError(f"standard deviation must be positive, got {variance}")
        variance = variance * variance
    return TruncatedGaussianPrice(float(mean), float(variance), float(lower), float(upper))


def fit_empirical(trace):
    """Empirical step model from a PriceTrace or a plain sequence of prices."""
    prices = trace.prices if isinstance(trace, PriceTrace) else np.asarray(trace, dtype=float)
    if prices.size == 0:
        raise ValueError("cannot fit an empirical model to an empty trace")
    lo, hi = float(np.min(prices)), float(np.max(prices))
    floor = lo - EMPIRICAL_FLOOR_OFFSET * max(1.0, abs(lo))
    return EmpiricalPrice(prices, floor, hi)


def mean_price_below(model: PriceModel, b: float) -> float:
    """Expected price conditioned on price <= b (the charged price under bid b)."""
    F = float(model.cdf(b))
    if F <= 0.0:
        raise InfeasibleBidError(b)
    b = min(float(b), model.upper)
    return float(model.partial_expectation(b)) / F


def sample_price(model: PriceModel, rng: np.random.Generator, size=None):
    """Inverse-transform draw(s) from the model."""
    return model.quantile(rng.random(size))


def model_from_dict(d):
    kind = d["kind"]
    if kind == UniformPrice.kind:
        return make_uniform(d["lower"], d["upper"])
    if kind == TruncatedGaussianPrice.kind:
        return make_truncated_gaussian(d["mean"], d["variance"], d["lower"], d["upper"])
    if kind == EmpiricalPrice.kind:
        return EmpiricalPrice(np.asarray(d["samples"], dtype=float), d["lower"], d["upper"])
    raise ValueError(f"unknown price model kind {kind!r}")


def grid(model: PriceModel, count: int) -> Sequence[float]:
    """Evenly spaced bids strictly above the lower bound, ending at the upper bound."""
    return np.linspace(model.lower, model.upper, count + 1)[1:]
