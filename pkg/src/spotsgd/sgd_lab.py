"""Real synchronous SGD on a synthetic least-squares problem.

The objective is G(w) = (1/S) sum_s (x_s . w - y_s)^2 / 2 with a design whose
Hessian spectrum is set exactly, so L and c are known.  Workers draw
mini-batches with replacement; the server averages the gradients of the
workers that are active in each iteration.  Running many replications gives
the mean optimality gap, which is compared with the error bound evaluated at
the constants estimated here.  Because the constants are estimates, the
comparison is an estimated-constant bound check rather than a proof.
"""

import csv
import dataclasses
import json
import math
from typing import Optional, Sequence

import numpy as np

from spotsgd.convergence import SgdConstants, bound_trajectory
from spotsgd.errors import DivergenceError

__all__ = [
    "QuadraticProblem", "make_problem", "estimate_constants", "ConstantEstimate",
    "averaged_gradient", "run_sync_sgd", "TrainRecord", "validate_bound", "BoundReport",
]

DIVERGENCE_GAP = 1e12
BOUND_LABEL = "estimated-constant bound"


@dataclasses.dataclass(frozen=True, eq=False)
class QuadraticProblem:
    X: np.ndarray
    y: np.ndarray
    w_star: np.ndarray
    G_star: float
    hessian: np.ndarray
    lambda_min: float
    lambda_max: float
    seed: int = 0

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def S(self):
        return self.X.shape[0]

    @property
    def condition_number(self):
        return self.lambda_max / self.lambda_min

    def objective(self, w):
        """G(w); ``w`` may be a batch of shape (..., d)."""
        r = np.asarray(w) @ self.X.T - self.y
        return 0.5 * np.mean(r * r, axis=-1)

    def gap(self, w):
        """G(w) - G*, computed as (w - w*)' H (w - w*) / 2 to avoid cancellation."""
        dw = np.asarray(w) - self.w_star
        return 0.5 * np.einsum("...i,ij,...j->...", dw, self.hessian, dw)

    def gradient(self, w):
        return (np.asarray(w) - self.w_star) @ self.hessian

    def to_dict(self):
        return {"d": self.d, "S": self.S, "lambda_min": self.lambda_min,
                "lambda_max": self.lambda_max, "G_star": self.G_star, "seed": self.seed}


def make_problem(d=20, S=500, condition=10.0, seed=0, noise=0.5, lambda_max=1.0):
    """Least-squares problem whose Hessian X'X/S has eigenvalues spread
    geometrically from lambda_max/condition to lambda_max."""
    if d < 1 or S < d:
        raise ValueError("need d >= 1 and S >= d")
    if condition < 1:
        raise ValueError("condition number must be at least 1")
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((S, d)))
    V, _ = np.linalg.qr(rng.standard_normal((d, d)))
    lam = np.geomspace(lambda_max / condition, lambda_max, d) if d > 1 else np.array([lambda_max])
    X = math.sqrt(S) * (Q * np.sqrt(lam)) @ V.T
    w_true = rng.standard_normal(d)
    y = X @ w_true + noise * rng.standard_normal(S)
    H = X.T @ X / S
    H = 0.5 * (H + H.T)
    w_star = np.linalg.solve(H, X.T @ y / S)
    r = X @ w_star - y
    G_star = float(0.5 * np.mean(r * r))
    eig = np.linalg.eigvalsh(H)
    return QuadraticProblem(X, y, w_star, G_star, H, float(eig[0]), float(eig[-1]), seed)


@dataclasses.dataclass(frozen=True)
class ConstantEstimate:
    constants: SgdConstants
    batch: int
    variance_ratio: float
    safety_M: float
    safety_MV: float
    probe_max_ratio: float
    probes: int
    w0: tuple

    def provenance(self):
        return {
            "L": "largest Hessian eigenvalue (exact)",
            "c": "smallest Hessian eigenvalue (exact)",
            "mu": "1: the mini-batch gradient is unbiased",
            "mu_G": "1: the mini-batch gradient is unbiased",
            "M_V": f"{self.safety_MV} x largest ratio of quadratic variance to |grad G|^2 "
                   f"({self.variance_ratio:.6g})",
            "M": f"{self.safety_M} x exact supremum of variance - M_V |grad G|^2",
            "probe_max_ratio": self.probe_max_ratio,
            "alpha": "supplied or 0.9 mu/(L M_G)",
            "G0": "G(w0) - G*",
        }

    def to_dict(self):
        d = {"constants": self.constants.to_dict(), "batch": self.batch,
             "variance_ratio": self.variance_ratio, "probes": self.probes,
             "probe_max_ratio": self.probe_max_ratio, "w0": list(self.w0)}
        d["provenance"] = self.provenance()
        return d


def _variance_quadratic(problem: QuadraticProblem):
    """Single-sample gradient variance as d' P d + 2 d' p + c0 in d = w - w*."""
    X = problem.X
    r = X @ problem.w_star - problem.y
    sq = np.einsum("si,si->s", X, X)
    H = problem.hessian
    P = (X.T * sq) @ X / problem.S - H @ H
    p = (X.T * (sq * r)).sum(axis=1) / problem.S
    c0 = float(np.mean(sq * r * r))
    return 0.5 * (P + P.T), p, c0


def estimate_constants(problem: QuadraticProblem, alpha=None, batch=1, probes=64, seed=0,
                       w0=None, safety=1.2, safety_MV=1.2) -> ConstantEstimate:
    """Constants of the moment assumptions for ``batch``-sample gradients of one worker.

    The single-worker variance at w is a quadratic form in w - w*; M_V bounds its
    ratio to |grad G|^2 and M is the exact supremum of what remains, both
    inflated by a safety factor.  Random probe points check the result.
    """
    H = problem.hessian
    L, c = problem.lambda_max, problem.lambda_min
    w0 = np.zeros(problem.d) if w0 is None else np.asarray(w0, dtype=float)
    full = batch >= problem.S
    if full:
        ratio = 0.0
        M_V = 0.0
        M = 0.0
    else:
        P, p, c0 = _variance_quadratic(problem)
        P, p, c0 = P / batch, p / batch, c0 / batch
        Hinv = np.linalg.inv(H)
        ratio = max(0.0, float(np.linalg.eigvalsh(Hinv @ P @ Hinv)[-1]))
        M_V = safety_MV * ratio
        K = M_V * H @ H - P
        M = safety * (c0 + float(p @ np.linalg.solve(K, p))) if M_V > 0 else safety * c0
    probe_ratio = 0.0
    if probes and not full:
        rng = np.random.default_rng(seed)
        scale = max(1.0, float(np.linalg.norm(w0 - problem.w_star)))
        P, p, c0 = _variance_quadratic(problem)
        for _ in range(probes):
            dw = rng.standard_normal(problem.d) * scale * rng.uniform(0, 1.5)
            var = (dw @ P @ dw + 2 * dw @ p + c0) / batch
            g = H @ dw
            allowed = M + M_V * float(g @ g)
            if allowed > 0:
                probe_ratio = max(probe_ratio, float(var / allowed))
        if not math.isfinite(probe_ratio):
            raise ValueError("probe produced a non-finite variance")
    M_G = M_V + 1.0
    if alpha is None:
        alpha = 0.9 / (L * M_G)
    G0 = float(problem.gap(w0))
    k = SgdConstants(L=L, c=c, mu=1.0, mu_G=1.0, M=M, M_V=M_V, alpha=alpha, G0=G0)
    return ConstantEstimate(k, batch, ratio, safety, safety_MV, probe_ratio, probes, tuple(w0.tolist()))


def averaged_gradient(problem: QuadraticProblem, w, workers, batch, rng, size=None):
    """Average of ``workers`` independent ``batch``-sample gradients at ``w``."""
    shape = (() if size is None else (size,)) + (workers, batch)
    if batch >= problem.S:
        g = problem.gradient(w)
        return np.broadcast_to(g, shape[:-2] + (problem.d,)).copy()
    idx = rng.integers(0, problem.S, size=shape)
    xs = problem.X[idx]
    r = xs @ np.asarray(w) - problem.y[idx]
    return (xs * r[..., None]).mean(axis=(-3, -2))


@dataclasses.dataclass
class TrainRecord:
    active: np.ndarray
    gap_mean: np.ndarray
    gap_se: np.ndarray
    gaps: Optional[np.ndarray] = None
    bound: Optional[np.ndarray] = None
    config: dict = dataclasses.field(default_factory=dict)

    @property
    def J(self):
        return self.active.size

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "active", "gap", "bound"])
            for j in range(self.J):
                b = "" if self.bound is None else repr(float(self.bound[j]))
                w.writerow([j + 1, int(self.active[j]), repr(float(self.gap_mean[j])), b])

    def write_sidecar(self, path):
        with open(path, "w") as fh:
            json.dump(self.config, fh, indent=2, sort_keys=True)
            fh.write("\n")


def run_sync_sgd(problem: QuadraticProblem, schedule: Sequence[int], alpha, batch, J=None,
                 seed=0, replications=1, w0=None, divisor="active", provisioned=None,
                 keep_gaps=False) -> TrainRecord:
    """J synchronous updates w <- w - (alpha / y_j) sum of the y_j active workers' gradients.

    ``divisor="provisioned"`` divides by the provisioned count instead (needs
    ``provisioned``), the update as written for a fixed worker pool.
    """
    sched = np.asarray(schedule, dtype=np.int64)
    J = sched.size if J is None else int(J)
    if sched.size < J:
        raise ValueError(f"schedule has {sched.size} entries, need {J}")
    sched = sched[:J]
    if np.any(sched < 1):
        raise ValueError("every iteration needs at least one active worker")
    if divisor not in ("active", "provisioned"):
        raise ValueError("divisor must be 'active' or 'provisioned'")
    if divisor == "provisioned":
        if provisioned is None:
            raise ValueError("provisioned counts are required for divisor='provisioned'")
        prov = np.broadcast_to(np.asarray(provisioned, dtype=float), (J,))
    rng = np.random.default_rng(seed)
    w0 = np.zeros(problem.d) if w0 is None else np.asarray(w0, dtype=float)
    W = np.tile(w0, (replications, 1))
    gaps = np.empty((J, replications))
    for j in range(J):
        y = int(sched[j])
        if batch >= problem.S:
            g = problem.gradient(W)
        else:
            g = _batch_gradients(problem, W, y, batch, rng)
        scale = alpha if divisor == "active" else alpha * y / prov[j]
        W = W - scale * g
        gaps[j] = problem.gap(W)
        worst = float(np.max(gaps[j]))
        if not worst <= DIVERGENCE_GAP:
            raise DivergenceError(
                f"optimality gap {worst:.3g} exceeded {DIVERGENCE_GAP:.0e} at iteration {j + 1}; "
                f"step size {alpha} is too large for this problem")
    se = gaps.std(axis=1, ddof=1) / math.sqrt(replications) if replications > 1 else np.zeros(J)
    return TrainRecord(sched.copy(), gaps.mean(axis=1), se, gaps if keep_gaps else None,
                       config={"alpha": alpha, "batch": batch, "J": J, "seed": seed,
                               "replications": replications, "divisor": divisor,
                               "problem": problem.to_dict()})


def _batch_gradients(problem, W, y, batch, rng):
    """Averaged gradient for each replication row of W."""
    R = W.shape[0]
    idx = rng.integers(0, problem.S, size=(R, y * batch))
    xs = problem.X[idx]
    r = np.einsum("rbi,ri->rb", xs, W) - problem.y[idx]
    return np.einsum("rbi,rb->ri", xs, r) / (y * batch)


@dataclasses.dataclass
class BoundReport:
    record: TrainRecord
    bound: np.ndarray
    margin: np.ndarray
    worst_z: float
    violations: int
    label: str = BOUND_LABEL

    @property
    def valid(self):
        return self.violations == 0

    def to_dict(self):
        return {"label": self.label, "valid": self.valid, "violations": self.violations,
                "worst_z": self.worst_z, "min_margin": float(np.min(self.margin)),
                "terminal_gap": float(self.record.gap_mean[-1]),
                "terminal_bound": float(self.bound[-1])}


def validate_bound(problem: QuadraticProblem, schedule, alpha=None, batch=None, J=None,
                   replications=100, seed=0, estimate: Optional[ConstantEstimate] = None,
                   w0=None, z=3.0) -> BoundReport:
    """Mean gap over replications against the bound with e_j = 1/y_j at every iteration.

    A violation is an iteration whose mean gap exceeds the bound by more than
    ``z`` standard errors.  The batch size defaults to the one ``estimate`` was
    made for; the constants are only valid for that batch size.
    """
    if estimate is None:
        estimate = estimate_constants(problem, alpha=alpha, batch=batch or 1, seed=seed, w0=w0)
    elif batch is not None and batch != estimate.batch:
        raise ValueError(f"constants were estimated for batch {estimate.batch}, not {batch}")
    batch = estimate.batch
    k = estimate.constants
    alpha = k.alpha
    w0 = np.asarray(estimate.w0)
    rec = run_sync_sgd(problem, schedule, alpha, batch, J, seed=seed, replications=replications,
                       w0=w0)
    bound = bound_trajectory(k, 1.0 / rec.active.astype(float))
    rec.bound = bound
    excess = rec.gap_mean - bound
    se = np.maximum(rec.gap_se, 1e-300)
    zs = excess / se
    return BoundReport(rec, bound, bound - rec.gap_mean, float(np.max(zs)),
                       int(np.sum(excess > z * rec.gap_se)))
