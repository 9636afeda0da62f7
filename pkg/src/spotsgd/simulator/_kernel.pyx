# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled event loop for the Monte Carlo simulator.

Mirrors ``_kernel_py.run_trials`` operation for operation; both read doubles
from the same per-trial PCG64 streams so their outputs are bit-identical.
"""

from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport exp, log, log1p, sqrt, ceil, fabs, INFINITY
from numpy.random cimport bitgen_t

import numpy as np

cdef double SQRT_2PI = 2.5066282746310002
cdef double HART_SPLIT = 7.07106781186547
cdef double P_LOW = 0.02425

# modes and codes shared with the Python twin
cdef enum:
    MODE_BID = 0
    MODE_PROVISION = 1
    PRICE_UNIFORM = 0
    PRICE_EMPIRICAL = 1
    PRICE_GAUSSIAN = 2
    RT_EXP = 0
    RT_SHIFTED = 1
    RT_DET = 2


cdef double norm_cdf(double x) noexcept nogil:
    cdef double xa = fabs(x), e, b, tail
    if xa > 37.0:
        tail = 0.0
    else:
        e = exp(-xa * xa / 2.0)
        if xa < HART_SPLIT:
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


cdef double acklam(double p) noexcept nogil:
    cdef double q, r
    if p < P_LOW:
        q = sqrt(-2.0 * log(p))
        return ((((((-7.784894002430293e-03 * q + -3.223964580411365e-01) * q
                    + -2.400758277161838e+00) * q + -2.549732539343734e+00) * q
                  + 4.374664141464968e+00) * q + 2.938163982698783e+00)
                / ((((7.784695709041462e-03 * q + 3.224671290700398e-01) * q
                     + 2.445134137142996e+00) * q + 3.754408661907416e+00) * q + 1.0))
    if p > 1.0 - P_LOW:
        q = sqrt(-2.0 * log(1.0 - p))
        return -((((((-7.784894002430293e-03 * q + -3.223964580411365e-01) * q
                     + -2.400758277161838e+00) * q + -2.549732539343734e+00) * q
                   + 4.374664141464968e+00) * q + 2.938163982698783e+00)
                 / ((((7.784695709041462e-03 * q + 3.224671290700398e-01) * q
                      + 2.445134137142996e+00) * q + 3.754408661907416e+00) * q + 1.0))
    q = p - 0.5
    r = q * q
    return ((((((-3.969683028665376e+01 * r + 2.209460984245205e+02) * r
                + -2.759285104469687e+02) * r + 1.383577518672690e+02) * r
              + -3.066479806614716e+01) * r + 2.506628277459239e+00) * q
            / (((((-5.447609879822406e+01 * r + 1.615858368580409e+02) * r
                  + -1.556989798598866e+02) * r + 6.680131188771972e+01) * r
                + -1.328068155288572e+01) * r + 1.0))


cdef double norm_ppf(double p) noexcept nogil:
    cdef double x, err, u
    cdef int i
    if p <= 0.0:
        return -INFINITY
    if p >= 1.0:
        return INFINITY
    x = acklam(p)
    for i in range(2):
        err = norm_cdf(x) - p
        u = err * SQRT_2PI * exp(x * x / 2.0)
        x = x - u / (1.0 + x * u / 2.0)
    return x


cdef double truncnorm_ppf(double u, const double[:] g) noexcept nogil:
    # g = mean, sd, za, zb, cdf_a, cdf_b, lo, hi
    cdef double z, p
    if g[2] > 0.0:
        z = -norm_ppf(g[4] + (1.0 - u) * (g[5] - g[4]))
    else:
        z = norm_ppf(g[4] + u * (g[5] - g[4]))
    p = g[0] + g[1] * z
    if p < g[6]:
        return g[6]
    if p > g[7]:
        return g[7]
    return p


cdef inline double draw_price(bitgen_t *rng, int code, const double[:] par,
                              const double[:] samples) noexcept nogil:
    cdef double u = rng.next_double(rng.state)
    cdef long idx
    cdef long N
    if code == PRICE_UNIFORM:
        return par[0] + u * (par[1] - par[0])
    if code == PRICE_EMPIRICAL:
        N = samples.shape[0]
        idx = <long>ceil(u * N) - 1
        if idx < 0:
            idx = 0
        if idx > N - 1:
            idx = N - 1
        return samples[idx]
    return truncnorm_ppf(u, par)


cdef inline double draw_duration(bitgen_t *rng, long y, int family, double rate, double shift,
                                 double fixed, double overhead) noexcept nogil:
    cdef double best = 0.0, r
    cdef long k
    if family == RT_DET:
        return fixed + overhead
    for k in range(y):
        r = -log1p(-rng.next_double(rng.state)) / rate
        if family == RT_SHIFTED:
            r = shift + r
        if k == 0 or r > best:
            best = r
    return best + overhead


def run_trials(list bitgens, dict cfg):
    """Run one trial per bit generator; see ``_kernel_py.run_trials`` for the contract."""
    cdef int mode = cfg["mode"]
    cdef int price_code = cfg["price_code"]
    cdef const double[:] par = cfg["price_params"]
    cdef const double[:] samples = cfg["samples"]
    cdef bint use_trace = cfg["use_trace"]
    cdef const double[:] trace_t = cfg["trace_t"]
    cdef const double[:] trace_p = cfg["trace_p"]
    cdef double trace_start = cfg["trace_start"]
    cdef double b1 = cfg["b1"], b2 = cfg["b2"]
    cdef long n1 = cfg["n1"], n = cfg["n"]
    cdef const long long[:] workers = cfg["workers"]
    cdef double q = cfg["q"], unit_price = cfg["unit_price"]
    cdef long J = cfg["J"]
    cdef int family = cfg["rt_family"]
    cdef double rate = cfg["rt_rate"], shift = cfg["rt_shift"]
    cdef double fixed = cfg["rt_fixed"], overhead = cfg["rt_overhead"]
    cdef const double[:] idle_slot = cfg["idle_slot"]
    cdef bint fixed_within = cfg["fixed_within"]
    cdef double run_redraw = cfg["run_redraw"]
    cdef bint keep_active = cfg["keep_active"]
    cdef double beta = cfg["beta"]

    cdef Py_ssize_t T = len(bitgens)
    cost_a = np.zeros(T)
    time_a = np.zeros(T)
    iters_a = np.zeros(T, dtype=np.int64)
    idle_a = np.zeros(T)
    trunc_a = np.zeros(T, dtype=np.uint8)
    restart_a = np.zeros(T, dtype=np.int64)
    weighted_a = np.zeros(T)
    s_active = np.zeros(J)
    s_inv = np.zeros(J)
    s_inv2 = np.zeros(J)
    s_cost = np.zeros(J)
    s_time = np.zeros(J)
    s_count = np.zeros(J, dtype=np.int64)
    active_m = np.zeros((T if keep_active else 0, J), dtype=np.int32)

    cdef double[:] v_cost = cost_a, v_time = time_a, v_idle = idle_a, v_w = weighted_a
    cdef long long[:] v_iters = iters_a, v_restart = restart_a
    cdef unsigned char[:] v_trunc = trunc_a
    cdef double[:] v_sa = s_active, v_si = s_inv, v_si2 = s_inv2, v_sc = s_cost, v_st = s_time
    cdef long long[:] v_cnt = s_count
    cdef int[:, :] v_act = active_m

    cdef Py_ssize_t t, ti
    cdef Py_ssize_t n_trace = trace_t.shape[0]
    cdef bitgen_t *rng
    cdef long done, y, y2, k, m
    cdef double clock, cost, idle, p, D, elapsed, seg, slot, weighted, t_abs, t_end = 0.0
    cdef bint truncated, have_price, interrupted
    cdef long long restarts

    if use_trace:
        t_end = trace_t[n_trace - 1]

    for t in range(T):
        rng = <bitgen_t *> PyCapsule_GetPointer(bitgens[t].capsule, "BitGenerator")
        with nogil:
            clock = 0.0
            cost = 0.0
            idle = 0.0
            done = 0
            ti = 0
            truncated = False
            have_price = False
            restarts = 0
            weighted = 0.0
            p = 0.0
            while done < J:
                slot = idle_slot[done]
                if mode == MODE_PROVISION:
                    m = workers[done]
                    y = 0
                    for k in range(m):
                        if rng.next_double(rng.state) >= q:
                            y += 1
                    if y == 0:
                        idle += slot
                        clock += slot
                        continue
                    D = draw_duration(rng, y, family, rate, shift, fixed, overhead)
                    cost += y * unit_price * D
                    clock += D
                else:
                    if use_trace:
                        t_abs = trace_start + clock
                        if t_abs > t_end:
                            truncated = True
                            break
                        while ti + 1 < n_trace and trace_t[ti + 1] <= t_abs:
                            ti += 1
                        p = trace_p[ti]
                    elif not have_price:
                        p = draw_price(rng, price_code, par, samples)
                    have_price = False
                    if p > b1:
                        if use_trace and t_abs + slot > t_end:
                            idle += t_end - t_abs
                            clock += t_end - t_abs
                            truncated = True
                            break
                        idle += slot
                        clock += slot
                        continue
                    y = n if p <= b2 else n1
                    D = draw_duration(rng, y, family, rate, shift, fixed, overhead)
                    if use_trace and t_abs + D > t_end:
                        cost += y * p * (t_end - t_abs)
                        clock += t_end - t_abs
                        truncated = True
                        break
                    if fixed_within:
                        cost += y * p * D
                        clock += D
                    else:
                        elapsed = 0.0
                        interrupted = False
                        while True:
                            seg = run_redraw
                            if D - elapsed < seg:
                                seg = D - elapsed
                            cost += y * p * seg
                            clock += seg
                            elapsed += seg
                            if elapsed >= D:
                                break
                            p = draw_price(rng, price_code, par, samples)
                            if p > b1:
                                interrupted = True
                                break
                            y2 = n if p <= b2 else n1
                            if y2 != y:
                                interrupted = True
                                have_price = True
                                break
                        if interrupted:
                            restarts += 1
                            if not have_price:
                                idle += slot
                                clock += slot
                            continue
                v_sa[done] += y
                v_si[done] += 1.0 / y
                v_si2[done] += 1.0 / (<double>y * y)
                v_sc[done] += cost
                v_st[done] += clock
                v_cnt[done] += 1
                weighted = weighted * beta + 1.0 / y
                if keep_active:
                    v_act[t, done] = <int>y
                done += 1
            v_cost[t] = cost
            v_time[t] = clock
            v_iters[t] = done
            v_idle[t] = idle
            v_trunc[t] = truncated
            v_restart[t] = restarts
            v_w[t] = weighted

    return {
        "cost": cost_a, "completion": time_a, "iterations": iters_a, "idle": idle_a,
        "truncated": trunc_a, "restarts": restart_a,
        "weighted_inverse": weighted_a, "sum_active": s_active,
        "sum_inverse": s_inv, "sum_inverse_sq": s_inv2, "sum_cum_cost": s_cost,
        "sum_cum_time": s_time, "count": s_count, "active": active_m if keep_active else None,
    }
