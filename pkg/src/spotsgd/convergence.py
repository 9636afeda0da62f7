"""Error bound for synchronous SGD with a varying number of active workers.

With step size alpha and contraction factor beta = 1 - alpha*c*mu, the
expected optimality gap after J iterations is bounded by

    beta^J * G0 + (alpha^2 L M / 2) * sum_j beta^(J-j) * E[1/y_j]

where y_j is the number of workers that contributed gradients in iteration j.
Everything here is a pure function of an immutable ``SgdConstants``.
"""

import configparser
import dataclasses
import math
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np
from scipy.signal import lfilter

from spotsgd.errors import ErrorFloorError

__all__ = [
    "SgdConstants", "error_bound", "bound_trajectory", "q_epsilon",
    "iterations_for_error", "inverse_moment", "jensen_penalty_check",
]

_KEYS = ("L", "c", "mu", "mu_G", "M", "M_V", "alpha", "G0")


@dataclasses.dataclass(frozen=True)
class SgdConstants:
    """Smoothness, convexity and gradient-moment constants plus the step size.

    ``G0`` is the expected initial optimality gap E[G(w0)] - G*.
    """

    L: float
    c: float
    mu: float
    mu_G: float
    M: float
    M_V: float
    alpha: float
    G0: float

    def __post_init__(self):
        for name in _KEYS:
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if self.L <= 0:
            raise ValueError("L must be positive")
        if not 0 < self.c <= self.L:
            raise ValueError("need 0 < c <= L")
        if self.mu <= 0 or self.mu_G < self.mu:
            raise ValueError("need mu_G >= mu > 0")
        if self.M < 0 or self.M_V < 0 or self.G0 < 0:
            raise ValueError("M, M_V and G0 must be non-negative")
        if not 0 < self.alpha < self.mu / (self.L * self.M_G):
            raise ValueError(
                f"step size {self.alpha} outside (0, mu/(L*M_G)) = (0, {self.max_step})")
        if not 0 < self.beta < 1:
            raise ValueError(f"contraction factor beta={self.beta} must lie in (0, 1)")

    @property
    def M_G(self):
        return self.M_V + self.mu_G ** 2

    @property
    def max_step(self):
        return self.mu / (self.L * self.M_G)

    @property
    def beta(self):
        return 1.0 - self.alpha * self.c * self.mu

    @property
    def noise_coeff(self):
        """alpha^2 L M / 2, the per-iteration variance injection."""
        return self.alpha ** 2 * self.L * self.M / 2.0

    @property
    def floor_coeff(self):
        """alpha L M / (2 c mu); times E[1/y] gives the asymptotic error floor."""
        return self.alpha * self.L * self.M / (2.0 * self.c * self.mu)

    def A(self):
        return self.G0

    def B(self, d=1.0):
        """alpha^2 L M d / 2 for an inverse-moment bound E[1/y] <= d / n^chi."""
        return self.noise_coeff * d

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {k: getattr(self, k) for k in _KEYS}

    def to_config(self):
        lines = [f"{k} = {getattr(self, k)!r}" for k in _KEYS]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: Mapping):
        values = dict(values)
        missing = [k for k in _KEYS if k not in values]
        if missing:
            raise KeyError(f"missing constants: {', '.join(missing)}")
        k = cls(**{name: float(values[name]) for name in _KEYS})
        if "M_G" in values and not math.isclose(float(values["M_G"]), k.M_G, rel_tol=1e-12):
            raise ValueError(f"M_G={values['M_G']} inconsistent with M_V + mu_G^2 = {k.M_G}")
        return k

    @classmethod
    def from_config(cls, text):
        return cls.from_mapping(read_flat_config(text))


def read_flat_config(text):
    """Parse ``key = value`` lines (``#`` comments allowed) into a dict of strings."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    parser.read_string("[config]\n" + text)
    return dict(parser["config"])


def _as_array(e):
    e = np.asarray(list(e) if not isinstance(e, np.ndarray) else e, dtype=float)
    if e.ndim != 1:
        raise ValueError("inverse moments must be a 1-D sequence")
    if np.any(e < 0) or np.any(e > 1):
        raise ValueError("inverse moments E[1/y_j] must lie in [0, 1]")
    return e


def error_bound(k: SgdConstants, e: Iterable[float]) -> float:
    """Bound on E[G(w_J)] - G* given E[1/y_j] for j = 1..J."""
    e = _as_array(e)
    J = e.size
    # beta^(J-j) built by repeated multiplication from the last iteration backwards
    weights = np.empty(J)
    w = 1.0
    for i in range(J - 1, -1, -1):
        weights[i] = w
        w *= k.beta
    return float(w * k.G0 + k.noise_coeff * math.fsum(weights * e))


def bound_trajectory(k: SgdConstants, e: Iterable[float]) -> np.ndarray:
    """Bound after each of iterations 1..J (the recursion b_j = beta b_{j-1} + coeff e_j)."""
    e = _as_array(e)
    out, _ = lfilter([k.noise_coeff], [1.0, -k.beta], e, zi=[k.beta * k.G0])
    return out


def q_epsilon(k: SgdConstants, eps: float, J: int) -> float:
    """Largest constant E[1/y] that still reaches error ``eps`` in ``J`` iterations."""
    if J < 1:
        raise ValueError("J must be at least 1")
    bJ = k.beta ** J
    floor = bJ * k.G0
    if eps <= floor:
        raise ErrorFloorError(
            f"error target {eps} not reachable in {J} iterations; "
            f"need eps > beta^J * G0 = {floor}", floor=floor)
    if k.M == 0:
        return math.inf
    return 2.0 * k.c * k.mu * (eps - floor) / (k.alpha * k.L * k.M * (1.0 - bJ))


def _static_bound(k, J, e):
    bJ = k.beta ** J
    return bJ * k.G0 + k.floor_coeff * e * (1.0 - bJ)


def iterations_for_error(k: SgdConstants, eps: float, e: float) -> int:
    """Smallest J whose bound with constant E[1/y] = e is at most ``eps``."""
    if eps >= k.G0:
        return 0
    noise = k.floor_coeff * e
    if eps <= noise:
        raise ErrorFloorError(
            f"error target {eps} is at or below the asymptotic floor {noise}", floor=noise)
    ratio = (eps - noise) / (k.G0 - noise)
    J = max(1, math.ceil(math.log(ratio) / math.log(k.beta)))
    # absorb rounding in the logarithm
    while _static_bound(k, J, e) > eps:
        J += 1
    while J > 1 and _static_bound(k, J - 1, e) <= eps:
        J -= 1
    return J


def inverse_moment(dist) -> float:
    """E[1/y] for a distribution given as {value: probability}."""
    items = dist.items() if isinstance(dist, Mapping) else dist
    total = 0.0
    mass = 0.0
    for y, p in items:
        if y <= 0:
            raise ValueError("worker counts must be positive")
        total += p / y
        mass += p
    if not math.isclose(mass, 1.0, rel_tol=1e-9):
        raise ValueError(f"probabilities sum to {mass}, not 1")
    return total


def jensen_penalty_check(dist, mean_workers=None) -> bool:
    """True when E[1/y] >= 1/E[y]; exact rational arithmetic for rational inputs."""
    items = list(dist.items() if isinstance(dist, Mapping) else dist)
    if all(isinstance(p, (int, Fraction)) for _, p in items):
        inv = sum(Fraction(p) / Fraction(y) for y, p in items)
        mean = sum(Fraction(p) * y for y, p in items) if mean_workers is None else Fraction(mean_workers)
        return inv >= 1 / mean
    inv = inverse_moment(items)
    mean = sum(p * y for y, p in items) if mean_workers is None else mean_workers
    return inv >= (1.0 / mean) * (1 - 1e-12)
