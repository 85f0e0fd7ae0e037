"""Directed polymers in random environment: partition functions by transfer DP,
the coupling with branching walks, and disorder criteria."""

from dataclasses import dataclass
import math

import numpy as np
from scipy.stats import t as student_t

from ._parallel import map_replicas
from ._rng import replica_streams
from .brwre_sim import run_trajectory
from .environment import EnvironmentField, classify_phase, couple_from_eta, env_moments
from .eta import EtaField, EtaLaw, lambda_of_beta
from .lattice_walk import DEFAULT_CELL_BUDGET, LatticeBox, LatticeField, check_budget, return_probability, spread
from .moments_exact import quenched_log_totals, quenched_mean_field

__all__ = ["EtaLaw", "EtaField", "lambda_of_beta", "PolymerResult", "polymer_dp",
           "coupling_identity_check", "dpre_clt_criterion", "strong_disorder_slope",
           "finite_t_comparison"]


@dataclass
class PolymerResult:
    T: int
    beta: float
    log_z: float
    log_zbar: float
    endpoint: LatticeField
    log_z_path: np.ndarray


def polymer_dp(eta, beta, T, d, max_cells=DEFAULT_CELL_BUDGET):
    """Z_T = E_S[exp(beta sum_{t<T} eta_{t,S_t})] and the endpoint law mu_T(S_T = .).

    Weights are collected at the destination of each step except the last,
    W_0 = delta_0 exp(beta eta_{0,0}), and the final step is a pure kernel
    step.  ``log_z_path[t]`` holds log Z_t for t = 0..T.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    check_budget(LatticeBox(d, T).n_cells, max_cells)
    lam = lambda_of_beta(eta.law, beta)
    origin = np.zeros((1, d), dtype=np.int64)
    log_scale = beta * float(eta.values(0, origin)[0])
    arr = np.ones((1,) * d)
    path = np.zeros(T + 1)
    for t in range(1, T + 1):
        arr = spread(arr)
        path[t] = log_scale + math.log(arr.sum())
        if t < T:
            h = beta * eta.on_box(t, LatticeBox(d, t))
            shift = float(h.max())
            arr = arr * np.exp(h - shift)
            log_scale += shift
            top = float(arr.max())
            arr /= top
            log_scale += math.log(top)
    total = float(arr.sum())
    log_z = log_scale + math.log(total)
    endpoint = LatticeField(LatticeBox(d, T), arr / total, probability=True)
    return PolymerResult(T, beta, log_z, log_z - T * lam, endpoint, path)


@dataclass(frozen=True)
class CouplingResidual:
    total: float
    endpoint: float

    @property
    def worst(self):
        return max(self.total, self.endpoint)


def coupling_identity_check(eta, beta, T, d, max_cells=DEFAULT_CELL_BUDGET):
    """Max-abs log residuals between the polymer DP and the quenched mean field
    of the coupled environment: log Z_T vs log P^q[N_T], and the endpoint law
    vs P^q[N_{T,.}] / P^q[N_T] over the common support."""
    poly = polymer_dp(eta, beta, T, d, max_cells)
    qm = quenched_mean_field(couple_from_eta(eta, beta), T, d, max_cells)
    res_total = abs(poly.log_z - qm.log_total())
    a = poly.endpoint.values
    b = qm.values / qm.values.sum()
    if np.any((a > 0) != (b > 0)):
        return CouplingResidual(res_total, math.inf)
    nz = a > 0
    return CouplingResidual(res_total, float(np.max(np.abs(np.log(a[nz]) - np.log(b[nz])))))


@dataclass(frozen=True)
class CriterionDecision:
    gap: float
    bound_lower: float
    bound_upper: float
    verdict: str


def dpre_clt_criterion(law, beta, d, pi=None):
    """Compare lambda(2 beta) - 2 lambda(beta) with the ln(1/pi_d) interval."""
    gap = lambda_of_beta(law, 2 * beta) - 2 * lambda_of_beta(law, beta)
    if pi is None:
        pi = return_probability(d)
    lo, hi = math.log(1.0 / pi.upper), math.log(1.0 / pi.lower)
    if gap < lo:
        verdict = "holds"
    elif gap >= hi:
        verdict = "fails"
    else:
        verdict = "inconclusive-within-interval"
    return CriterionDecision(gap, lo, hi, verdict)


@dataclass(frozen=True)
class SlopeEstimate:
    slope: float
    lower: float
    upper: float
    replicas_used: int
    excluded: int
    route: str
    tag: str
    confidence: float


def _ols_slope(t, y):
    tc = t - t.mean()
    return float(np.dot(tc, y - y.mean()) / np.dot(tc, tc))


def _slope_worker(args):
    model, d, T, seed, i, route = args
    env_seed, rng = replica_streams(seed, i)
    env = EnvironmentField(model, env_seed)
    lo = T // 2
    t = np.arange(lo, T + 1, dtype=float)
    if route == "polymer":
        y = quenched_log_totals(env, T, d) - np.arange(T + 1) * math.log(env_moments(model).m)
        return _ols_slope(t, y[lo:])
    stats = run_trajectory(env, T, rng, d)
    if stats.cause != "horizon":
        return None
    return _ols_slope(t, stats.ln_nbar[lo:])


def strong_disorder_slope(model, d, T, replicas, seed, route="polymer", confidence=0.99, workers=1):
    """Per-replica OLS slope of ln Nbar_t (branching route) or of
    ln(P^q[N_t] / m^t) (polymer route; equals ln Zbar_t for coupled models)
    over t in [T/2, T], aggregated into a t-interval across replicas.

    Replicas that die out or overflow on the branching route are excluded
    and counted.  The result is tagged "exploratory" unless (a1) or (a3) holds.
    """
    if route not in ("polymer", "branching"):
        raise ValueError(f"unknown route {route!r}")
    phase = classify_phase(model, d)
    tag = "criterion" if (phase.a1 or phase.a3) else "exploratory"
    slopes = map_replicas(_slope_worker, [(model, d, T, seed, i, route) for i in range(replicas)], workers)
    kept = np.array([s for s in slopes if s is not None])
    n = len(kept)
    if n < 2:
        return SlopeEstimate(math.nan, math.nan, math.nan, n, replicas - n, route, tag, confidence)
    mean = float(kept.mean())
    half = float(student_t.ppf(0.5 + confidence / 2, n - 1)) * float(kept.std(ddof=1)) / math.sqrt(n)
    return SlopeEstimate(mean, mean - half, mean + half, n, replicas - n, route, tag, confidence)



@dataclass(frozen=True)
class FiniteTComparison:
    """Descriptive finite-T comparison of Nbar_T and Zbar_T over replicas.

    Both have mean one at every finite T, so only spread is informative.
    """
    T: int
    mean_nbar: float
    var_nbar: float
    mean_zbar: float
    var_zbar: float
    replicas_used: int
    excluded: int


def _compare_worker(args):
    model, d, T, seed, i = args
    env_seed, rng = replica_streams(seed, i)
    env = EnvironmentField(model, env_seed)
    zbar = math.exp(float(quenched_log_totals(env, T, d)[T]) - T * math.log(env_moments(model).m))
    stats = run_trajectory(env, T, rng, d)
    if stats.cause == "overflow":
        return None
    nbar = math.exp(float(stats.ln_nbar[-1])) if stats.cause == "horizon" else 0.0
    return nbar, zbar


def finite_t_comparison(model, d, T, replicas, seed, workers=1):
    """Sample Nbar_T (branching) and Zbar_T = P^q[N_T]/m^T (polymer) in the same
    environments.  Extinct replicas count as Nbar_T = 0; overflows are excluded."""
    res = [r for r in map_replicas(_compare_worker, [(model, d, T, seed, i) for i in range(replicas)], workers)
           if r is not None]
    if not res:
        return FiniteTComparison(T, math.nan, math.nan, math.nan, math.nan, 0, replicas)
    arr = np.array(res)
    ddof = 1 if len(arr) > 1 else 0
    return FiniteTComparison(T, float(arr[:, 0].mean()), float(arr[:, 0].var(ddof=ddof)),
                             float(arr[:, 1].mean()), float(arr[:, 1].var(ddof=ddof)),
                             len(arr), replicas - len(arr))
