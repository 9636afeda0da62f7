"""Standard normal CDF and quantile.

The CDF is Hart's double-precision rational approximation (algorithm 5666 as
laid out by G. West, "Better approximations to cumulative normal functions",
Wilmott 2005); absolute error stays below 1e-15 on the real line.  The
quantile starts from P. J. Acklam's rational approximation and applies two
Halley steps against that CDF.

The scalar functions are written with the exact operation order used by the
compiled simulator kernel so both produce identical doubles.
"""

import math

import numpy as np

_SQRT_2PI = 2.5066282746310002
_HART_SPLIT = 7.07106781186547

_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def norm_cdf(x):
    xa = abs(x)
    if xa > 37.0:
        tail = 0.0
    else:
        e = math.exp(-xa * xa / 2.0)
        if xa < _HART_SPLIT:
            b = 3.52624965998911e-02 * xa + 0.700383064443688
            b = b * xa + 6.37396220353165
            b = b * xa + 33.912866078383
            b = b * xa + 112.079291497871
            b = b * xa + 221.213596169931
            b = b * xa + 220.206867912376
            tail = e * b
            b = 8.83883476483184e-02 * xa + 1.75566716318264
            b = b * xa + 16.064177579207
            b = b * xa + 86.7807322029461
            b = b * xa + 296.564248779674
            b = b * xa + 637.333633378831
            b = b * xa + 793.826512519948
            b = b * xa + 440.413735824752
            tail = tail / b
        else:
            b = xa + 0.65
            b = xa + 4.0 / b
            b = xa + 3.0 / b
            b = xa + 2.0 / b
            b = xa + 1.0 / b
            tail = e / b / 2.506628274631
    if x > 0.0:
        return 1.0 - tail
    return tail


def norm_pdf(x):
    return math.exp(-x * x / 2.0) / _SQRT_2PI


def _acklam(p):
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    if p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        return -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                 / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    q = p - 0.5
    r = q * q
    return ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
            / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))


def norm_ppf(p):
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return math.inf
    x = _acklam(p)
    for _ in range(2):
        err = norm_cdf(x) - p
        u = err * _SQRT_2PI * math.exp(x * x / 2.0)
        x = x - u / (1.0 + x * u / 2.0)
    return x


def truncnorm_ppf(u, mean, sd, za, zb, cdf_a, cdf_b, lo, hi):
    """Quantile of N(mean, sd^2) truncated to [lo, hi] (za, zb standardized).

    When the window sits in the upper tail the computation is mirrored so the
    subtraction happens where the CDF has resolution.
    """
    if za > 0.0:
        # cdf_a, cdf_b hold Phi(-zb), Phi(-za) in this branch
        z = -norm_ppf(cdf_a + (1.0 - u) * (cdf_b - cdf_a))
    else:
        z = norm_ppf(cdf_a + u * (cdf_b - cdf_a))
    p = mean + sd * z
    if p < lo:
        return lo
    if p > hi:
        return hi
    return p


norm_cdf_v = np.vectorize(norm_cdf, otypes=[float])
norm_ppf_v = np.vectorize(norm_ppf, otypes=[float])
truncnorm_ppf_v = np.vectorize(truncnorm_ppf, otypes=[float])
