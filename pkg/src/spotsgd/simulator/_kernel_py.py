"""Pure-Python event loop, a line-by-line twin of the compiled ``_kernel``.

``run_trials(bitgens, cfg)`` runs one trial per PCG64 bit generator.  Draws are
taken from a buffered ``Generator.random`` block, which reads the same
``next_double`` stream the compiled kernel reads through the bit generator
capsule, so both backends return identical arrays for identical inputs.

``cfg`` keys: mode (0 bid, 1 provision), price_code (0 uniform, 1 empirical,
2 truncated Gaussian), price_params, samples, use_trace, trace_t, trace_p,
trace_start, b1, b2, n1, n, workers (provisioned count per iteration), q,
unit_price, J, rt_family (0 exponential, 1 shifted, 2 deterministic), rt_rate,
rt_shift, rt_fixed, rt_overhead, idle_slot (per iteration), fixed_within,
run_redraw, keep_active, beta (per-trial weighted sum w <- beta w + 1/y).
"""

import math

import numpy as np

from spotsgd._normal import truncnorm_ppf

MODE_BID, MODE_PROVISION = 0, 1
PRICE_UNIFORM, PRICE_EMPIRICAL, PRICE_GAUSSIAN = 0, 1, 2
RT_EXP, RT_SHIFTED, RT_DET = 0, 1, 2

_BLOCK = 4096


class _Stream:
    """Buffered uniform doubles from one generator."""

    __slots__ = ("bitgen", "gen", "buf", "pos", "start", "used")

    def __init__(self, bitgen):
        self.bitgen = bitgen
        self.gen = np.random.Generator(bitgen)
        self.start = bitgen.state
        self.buf = []
        self.pos = 0
        self.used = 0

    def next_double(self):
        if self.pos == len(self.buf):
            self.buf = self.gen.random(_BLOCK).tolist()
            self.pos = 0
        u = self.buf[self.pos]
        self.pos += 1
        self.used += 1
        return u

    def close(self):
        """Leave the generator just past the draws actually used, as the compiled kernel does."""
        self.bitgen.state = self.start
        self.bitgen.advance(self.used)


def _draw_price(rng, code, par, samples):
    u = rng.next_double()
    if code == PRICE_UNIFORM:
        return par[0] + u * (par[1] - par[0])
    if code == PRICE_EMPIRICAL:
        N = len(samples)
        idx = math.ceil(u * N) - 1
        idx = min(max(idx, 0), N - 1)
        return samples[idx]
    return truncnorm_ppf(u, *par)


def _draw_duration(rng, y, family, rate, shift, fixed, overhead):
    if family == RT_DET:
        return fixed + overhead
    best = 0.0
    for k in range(y):
        r = -math.log1p(-rng.next_double()) / rate
        if family == RT_SHIFTED:
            r = shift + r
        if k == 0 or r > best:
            best = r
    return best + overhead


def run_trials(bitgens, cfg):
    mode = cfg["mode"]
    price_code = cfg["price_code"]
    par = [float(v) for v in cfg["price_params"]]
    samples = [float(v) for v in cfg["samples"]]
    use_trace = bool(cfg["use_trace"])
    trace_t = [float(v) for v in cfg["trace_t"]]
    trace_p = [float(v) for v in cfg["trace_p"]]
    trace_start = cfg["trace_start"]
    b1, b2 = cfg["b1"], cfg["b2"]
    n1, n = cfg["n1"], cfg["n"]
    workers = [int(v) for v in cfg["workers"]]
    q, unit_price = cfg["q"], cfg["unit_price"]
    J = cfg["J"]
    family = cfg["rt_family"]
    rate, shift = cfg["rt_rate"], cfg["rt_shift"]
    fixed, overhead = cfg["rt_fixed"], cfg["rt_overhead"]
    idle_slot = [float(v) for v in cfg["idle_slot"]]
    fixed_within = bool(cfg["fixed_within"])
    run_redraw = cfg["run_redraw"]
    keep_active = bool(cfg["keep_active"])
    beta = cfg["beta"]

    T = len(bitgens)
    cost_a = np.zeros(T)
    time_a = np.zeros(T)
    iters_a = np.zeros(T, dtype=np.int64)
    idle_a = np.zeros(T)
    trunc_a = np.zeros(T, dtype=np.uint8)
    restart_a = np.zeros(T, dtype=np.int64)
    weighted_a = np.zeros(T)
    s_active = [0.0] * J
    s_inv = [0.0] * J
    s_inv2 = [0.0] * J
    s_cost = [0.0] * J
    s_time = [0.0] * J
    s_count = [0] * J
    active_m = np.zeros((T if keep_active else 0, J), dtype=np.int32)

    n_trace = len(trace_t)
    t_end = trace_t[n_trace - 1] if use_trace else 0.0
    t_abs = 0.0

    for t in range(T):
        rng = _Stream(bitgens[t])
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
                for _ in range(m):
                    if rng.next_double() >= q:
                        y += 1
                if y == 0:
                    idle += slot
                    clock += slot
                    continue
                D = _draw_duration(rng, y, family, rate, shift, fixed, overhead)
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
                    p = _draw_price(rng, price_code, par, samples)
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
                D = _draw_duration(rng, y, family, rate, shift, fixed, overhead)
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
                        p = _draw_price(rng, price_code, par, samples)
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
            s_active[done] += y
            s_inv[done] += 1.0 / y
            s_inv2[done] += 1.0 / (float(y) * y)
            s_cost[done] += cost
            s_time[done] += clock
            s_count[done] += 1
            weighted = weighted * beta + 1.0 / y
            if keep_active:
                active_m[t, done] = y
            done += 1
        cost_a[t] = cost
        time_a[t] = clock
        iters_a[t] = done
        idle_a[t] = idle
        trunc_a[t] = truncated
        restart_a[t] = restarts
        weighted_a[t] = weighted
        rng.close()

    return {
        "cost": cost_a, "completion": time_a, "iterations": iters_a, "idle": idle_a,
        "truncated": trunc_a, "restarts": restart_a,
        "weighted_inverse": weighted_a, "sum_active": np.array(s_active),
        "sum_inverse": np.array(s_inv), "sum_inverse_sq": np.array(s_inv2),
        "sum_cum_cost": np.array(s_cost), "sum_cum_time": np.array(s_time),
        "count": np.array(s_count, dtype=np.int64), "active": active_m if keep_active else None,
    }
