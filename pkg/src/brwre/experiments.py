"""Gaussian reference density, bounded test functions and the Monte Carlo
experiment drivers that are confronted with the exact moments."""

from dataclasses import dataclass
import math

import numpy as np
from scipy import integrate
from scipy.stats import binomtest, gamma

from ._parallel import map_replicas
from ._rng import replica_streams
from .brwre_sim import clt_statistic, density_stats, run_trajectory
from .environment import EnvironmentField, classify_phase, env_moments
from .moments_exact import overlap_bound_series_all, second_moment_functional


def gaussian_density(t, x, d):
    """Centered gaussian on R^d with covariance (t/d) I, evaluated at rows of x."""
    if t <= 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    return (d / (2 * math.pi * t)) ** (d / 2) * np.exp(-d * r2 / (2 * t))


@dataclass(frozen=True)
class TestFunction:
    """A bounded function on R^d evaluated on arrays of shape (..., d).

    ``cosine_terms`` lists (coef, theta) with f(u) = sum coef cos(theta.u)
    when f is a finite cosine sum; the exact second-moment route needs it.
    Instances are plain data so that they pickle into worker processes.
    """

    kind: str
    params: tuple
    sup_norm: float
    cosine_terms: tuple = None
    closed_integral: float = None

    __test__ = False

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "constant":
            return np.full(u.shape[:-1], self.params[0])
        if self.kind == "cosine":
            return np.cos(u @ np.asarray(self.params))
        r2 = np.sum(u * u, axis=-1)
        if self.kind == "gaussian-bump":
            return np.exp(-self.params[0] * r2)
        coeffs, clip, _ = self.params
        return np.clip(np.polynomial.polynomial.polyval(r2, coeffs), -clip, clip)

    @property
    def radial(self):
        return self.kind in ("gaussian-bump", "clipped-polynomial")

    def spec(self):
        return f"{self.kind}(" + ",".join(repr(p) for p in self.params) + ")"


def constant(c=1.0, d=1):
    c = float(c)
    return TestFunction("constant", (c,), abs(c), ((c, np.zeros(d)),), c)


def cosine(theta):
    theta = np.asarray(theta, dtype=float)
    d = len(theta)
    integral = math.exp(-float(theta @ theta) / (2 * d))
    return TestFunction("cosine", tuple(theta.tolist()), 1.0, ((1.0, theta),), integral)


def gaussian_bump(a, d):
    a = float(a)
    if a <= 0:
        raise ValueError("a must be positive")
    return TestFunction("gaussian-bump", (a, d), 1.0, None, (1 + 2 * a / d) ** (-d / 2))


def clipped_polynomial(coeffs, clip, d):
    """u -> clip(sum_k coeffs[k] |u|^{2k}) into [-clip, clip]."""
    coeffs = tuple(float(c) for c in coeffs)
    return TestFunction("clipped-polynomial", (coeffs, float(clip), d), float(clip))


def parse_test_function(text, d):
    """``constant(c)``, ``cosine(t1,...,td)``, ``gaussian-bump(a)``."""
    s = text.replace(" ", "")
    name, _, rest = s.partition("(")
    args = [float(v) for v in rest.rstrip(")").split(",") if v]
    if name == "constant":
        return constant(args[0] if args else 1.0, d)
    if name == "cosine":
        if len(args) != d:
            raise ValueError(f"cosine needs {d} components")
        return cosine(args)
    if name == "gaussian-bump":
        return gaussian_bump(args[0], d)
    raise ValueError(f"unknown test function {text!r}")


def _radial_quadrature(f, d):
    # |U|^2 for U ~ g_1 is gamma(d/2, scale 2/d)
    dist = gamma(d / 2, scale=2.0 / d)

    def integrand(s):
        u = np.zeros((1, d))
        u[0, 0] = math.sqrt(s)
        return float(f(u)[0]) * dist.pdf(s)

    val, err = integrate.quad(integrand, 0, np.inf, epsabs=1e-12, epsrel=1e-12, limit=200)
    if err > 1e-8:
        raise ArithmeticError("quadrature did not converge")
    return val


def hermite_quadrature(f, d, nodes=60):
    """Tensor Gauss-Hermite quadrature of int f g_1 (independent of the radial route)."""
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    x = x / math.sqrt(d)
    w = w / w.sum()
    grids = np.meshgrid(*([x] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.ones(len(pts))
    for wg in np.meshgrid(*([w] * d), indexing="ij"):
        weights = weights * wg.ravel()
    return float(np.dot(weights, f(pts)))


def integral_fg1(f, d):
    """int f g_1: closed form when known, radial quadrature otherwise."""
    if f.closed_integral is not None:
        return f.closed_integral
    if f.radial:
        return _radial_quadrature(f, d)
    return hermite_quadrature(f, d)


def exact_clt_error(model, d, T, f):
    """E[D_T^2] for D_T = sum_x Nbar_{T,x} f(x/sqrt T) - Nbar_T int f g_1."""
    I = integral_fg1(f, d)
    one = constant(1.0, d)
    s = math.sqrt(T)
    return (second_moment_functional(model, d, T, f, f, scale=s)
            - 2 * I * second_moment_functional(model, d, T, f, one, scale=s)
            + I * I * second_moment_functional(model, d, T, one, one, scale=s))


@dataclass(frozen=True)
class TableRow:
    T: int
    replicas: int
    mean: float
    variance: float
    target: float
    standardized_error: float

    @property
    def std_error(self):
        return math.sqrt(self.variance / self.replicas)


@dataclass
class ConvergenceTable:
    rows: list
    tag: str
    excluded: dict

    HEADER = ("T", "replicas", "mean", "variance", "target", "standardized_error")

    def as_rows(self):
        return [(r.T, r.replicas, r.mean, r.variance, r.target, r.standardized_error) for r in self.rows]


def _clt_worker(args):
    model, d, f, horizons, seed, i = args
    env_seed, rng = replica_streams(seed, i)
    env = EnvironmentField(model, env_seed)
    m = env_moments(model).m
    I = integral_fg1(f, d)
    want = set(horizons)
    out = {}

    def observe(pop):
        if pop.time in want:
            stat = clt_statistic(pop, f, m, pop.time)
            nbar = clt_statistic(pop, lambda u: np.ones(len(u)), m, pop.time)
            out[pop.time] = stat - nbar * I

    stats = run_trajectory(env, max(horizons), rng, d, callback=observe)
    if stats.cause == "overflow":
        return None
    # after extinction every later statistic is exactly zero
    return [out.get(T, 0.0) for T in horizons]


def clt_l2_experiment(model, d, f, horizons, replicas, seed, workers=1, exact=True):
    """Monte Carlo E[D_T^2] per horizon with the exact value as target.

    Extinct replicas stay in the sample (their D_T is 0, which is part of the
    law); replicas that overflow are excluded and counted.
    """
    horizons = sorted(int(T) for T in horizons)
    phase = classify_phase(model, d)
    tag = "criterion" if phase.l2_regime else "exploratory"
    res = map_replicas(_clt_worker, [(model, d, f, horizons, seed, i) for i in range(replicas)], workers)
    kept = np.array([r for r in res if r is not None], dtype=float).reshape(-1, len(horizons))
    rows = []
    for j, T in enumerate(horizons):
        sq = kept[:, j] ** 2
        n = len(sq)
        mean = float(sq.mean()) if n else math.nan
        var = float(sq.var(ddof=1)) if n > 1 else math.nan
        target = exact_clt_error(model, d, T, f) if exact and f.cosine_terms is not None else math.nan
        se = math.sqrt(var / n) if n > 1 else math.nan
        z = (mean - target) / se if se and se > 0 else (0.0 if mean == target else math.nan)
        rows.append(TableRow(T, n, mean, var, float(target), float(z)))
    return ConvergenceTable(rows, tag, {"overflow": replicas - len(kept)})


def _ccl_worker(args):
    model, d, f, T, seed, i = args
    env_seed, rng = replica_streams(seed, i)
    stats = run_trajectory(EnvironmentField(model, env_seed), T, rng, d)
    if stats.cause == "overflow":
        return "overflow"
    pop = stats.final
    if not pop.alive:
        return None
    s = math.sqrt(T)
    rho = pop.counts / float(pop.counts.sum(dtype=np.float64))
    return float(np.dot(rho, f(pop.coords / s)))


@dataclass(frozen=True)
class ConditionalCLTResult:
    epsilon: tuple
    rates: tuple
    intervals: tuple
    survivors: int
    replicas: int
    overflow: int

    @property
    def survival_fraction(self):
        return self.survivors / self.replicas


def conditional_clt_experiment(model, d, f, T, replicas, epsilon, seed, workers=1, confidence=0.99):
    """P(|sum_x rho_{T,x} f(x/sqrt T) - int f g_1| >= eps | N_T > 0) for each eps."""
    eps = tuple(float(e) for e in np.atleast_1d(epsilon))
    I = integral_fg1(f, d)
    res = map_replicas(_ccl_worker, [(model, d, f, T, seed, i) for i in range(replicas)], workers)
    vals = np.array([r for r in res if r is not None and r != "overflow"], dtype=float)
    overflow = sum(r == "overflow" for r in res)
    rates, cis = [], []
    for e in eps:
        if len(vals) == 0:
            rates.append(math.nan)
            cis.append((math.nan, math.nan))
            continue
        k = int(np.sum(np.abs(vals - I) >= e))
        ci = binomtest(k, len(vals)).proportion_ci(confidence, method="exact")
        rates.append(k / len(vals))
        cis.append((float(ci.low), float(ci.high)))
    return ConditionalCLTResult(eps, tuple(rates), tuple(cis), len(vals), replicas, overflow)


def overlap_quantiles(samples, d, probs=(0.5, 0.9, 0.99)):
    """{T: quantiles of T^{d/2} R_T} from {T: array of R_T among survivors}."""
    out = {}
    for T, r in samples.items():
        r = np.asarray(r, dtype=float)
        out[T] = tuple(float(q) for q in np.quantile(T ** (d / 2) * r, probs)) if len(r) else \
            tuple(math.nan for _ in probs)
    return out


def _overlap_worker(args):
    model, d, horizons, seed, i = args
    env_seed, rng = replica_streams(seed, i)
    want = set(horizons)
    out = {}

    def observe(pop):
        if pop.time in want and pop.alive:
            out[pop.time] = density_stats(pop)[1]

    stats = run_trajectory(EnvironmentField(model, env_seed), max(horizons), rng, d, callback=observe)
    return out, stats.cause


@dataclass(frozen=True)
class OverlapRow:
    T: int
    survivors: int
    overflow: int
    q50: float
    q90: float
    q99: float
    exact_overlay: float


def overlap_scaling_experiment(model, d, horizons, replicas, seed, workers=1):
    """Quantiles of T^{d/2} R_T among survivors, with T^{d/2} sum_x E[Nbar_{T,x}^2].

    A replica that overflows before T contributes nothing at T and is counted.
    """
    horizons = sorted(int(T) for T in horizons)
    res = map_replicas(_overlap_worker, [(model, d, horizons, seed, i) for i in range(replicas)], workers)
    samples = {T: [o[T] for o, _ in res if T in o] for T in horizons}
    series = overlap_bound_series_all(model, d, max(horizons))
    q = overlap_quantiles(samples, d)
    rows = []
    for T in horizons:
        over = sum(1 for o, cause in res if T not in o and cause == "overflow")
        rows.append(OverlapRow(T, len(samples[T]), over, *q[T], T ** (d / 2) * float(series[T])))
    return rows
