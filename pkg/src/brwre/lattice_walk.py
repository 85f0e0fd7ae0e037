"""Simple random walk on Z^d: exact t-step laws, return probability,
a discrete Feynman-Kac solver and pair-walk collision weights.

All dense computations live on a centered box {x : |x|_inf <= R} stored as
an ndarray of shape (2R+1,)*d, with the origin at index (R,)*d.  Boxes are
always sized to the reachable region so no DP ever truncates mass.
"""

from dataclasses import dataclass, field
from functools import lru_cache
import math

import numba
import numpy as np
from scipy.special import gammaln, zeta
from scipy.stats import norm

from .errors import NumericOverflowError, ResourceLimitError

DEFAULT_CELL_BUDGET = 50_000_000


def check_budget(cells, max_cells=DEFAULT_CELL_BUDGET, what="lattice box"):
    if cells > max_cells:
        raise ResourceLimitError(f"{what} needs {cells:.3g} cells, budget is {max_cells:.3g}")


@dataclass(frozen=True)
class LatticeBox:
    dimension: int
    radius: int

    def __post_init__(self):
        if self.dimension < 1 or self.radius < 0:
            raise ValueError("need dimension >= 1 and radius >= 0")

    @property
    def width(self):
        return 2 * self.radius + 1

    @property
    def shape(self):
        return (self.width,) * self.dimension

    @property
    def n_cells(self):
        return self.width ** self.dimension

    def index(self, coords):
        """Linear index of each row of ``coords``."""
        coords = np.atleast_2d(np.asarray(coords, dtype=np.int64))
        if np.any(np.abs(coords) > self.radius):
            raise IndexError("site outside box")
        return np.ravel_multi_index(tuple((coords + self.radius).T), self.shape)

    def coords_of(self, index):
        idx = np.unravel_index(np.asarray(index, dtype=np.int64), self.shape)
        return np.stack(idx, axis=-1) - self.radius

    def coords(self):
        """Array of shape ``shape + (d,)`` holding the site of every cell."""
        grids = np.indices(self.shape, dtype=np.int64) - self.radius
        return np.moveaxis(grids, 0, -1)


@dataclass
class LatticeField:
    """Real values over a box, scaled by ``exp(log_scale)``."""

    box: LatticeBox
    values: np.ndarray
    log_scale: float = 0.0
    probability: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.box.shape:
            raise ValueError(f"values shape {self.values.shape} != box shape {self.box.shape}")
        if self.probability:
            if np.any(self.values < 0) or abs(self.total() - 1.0) > 1e-12:
                raise ValueError("probability field must be nonnegative with unit mass")

    def total(self):
        return float(self.values.sum() * math.exp(self.log_scale))

    def log_total(self):
        return math.log(self.values.sum()) + self.log_scale

    def at(self, x):
        x = np.asarray(x, dtype=np.int64)
        if np.any(np.abs(x) > self.box.radius):
            return 0.0
        return float(self.values[tuple(x + self.box.radius)] * math.exp(self.log_scale))

    def log_values(self):
        with np.errstate(divide="ignore"):
            return np.log(self.values) + self.log_scale

    def dense(self):
        """Plain values with the scale folded in (may overflow)."""
        with np.errstate(over="raise"):
            try:
                return self.values * math.exp(self.log_scale)
            except (OverflowError, FloatingPointError) as exc:
                raise NumericOverflowError("field exceeds double range; use log_values()") from exc


def step_prob(x, y, d):
    """Nearest-neighbour transition probability p(x, y) on Z^d."""
    diff = np.asarray(y, dtype=np.int64) - np.asarray(x, dtype=np.int64)
    return 1.0 / (2 * d) if int(np.sum(diff * diff)) == 1 else 0.0


def _axis_slices(d, axis, lo, hi):
    sl = [slice(1, -1)] * d
    sl[axis] = slice(lo, hi)
    return tuple(sl)


def spread(arr):
    """One forward kernel step: radius R field -> radius R+1 field."""
    d = arr.ndim
    out = np.zeros(tuple(s + 2 for s in arr.shape), dtype=arr.dtype)
    for axis in range(d):
        out[_axis_slices(d, axis, 0, -2)] += arr
        out[_axis_slices(d, axis, 2, None)] += arr
    out /= 2 * d
    return out


def contract(arr):
    """Backward kernel step: g(x) = E^x[f(S_1)], radius R+1 -> radius R."""
    d = arr.ndim
    inner = tuple(slice(1, -1) for _ in range(d))
    out = np.zeros(arr[inner].shape, dtype=arr.dtype)
    for axis in range(d):
        lo = list(inner)
        hi = list(inner)
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        out += arr[tuple(lo)] + arr[tuple(hi)]
    out /= 2 * d
    return out


def delta_field(d):
    return np.ones((1,) * d)


def t_step_distribution(d, t, max_cells=DEFAULT_CELL_BUDGET):
    """x -> p_t(0, x) on the box of radius t."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    box = LatticeBox(d, t)
    check_budget(box.n_cells, max_cells)
    arr = delta_field(d)
    for _ in range(t):
        arr = spread(arr)
    return LatticeField(box, arr, probability=True)


def fk_solve(d, phi0, a, b, T, radius=0, max_cells=DEFAULT_CELL_BUDGET):
    """Solve phi_t(x) = E^x[a_t(S_1) phi_{t-1}(S_1)] + b_t(x) for t = 1..T.

    ``phi0`` is a callable on site arrays of shape (..., d); ``a`` and ``b``
    are callables ``(t, sites)`` or plain numbers.  Returns phi_T on the box of
    the requested radius.  phi_t is computed exactly on radius + T - t, which
    is all phi_T can see.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    outer = LatticeBox(d, radius + T)
    check_budget(outer.n_cells, max_cells)

    def evaluate(fn, t, box):
        if callable(fn):
            return np.asarray(fn(t, box.coords()), dtype=np.float64)
        return np.full(box.shape, float(fn))

    phi = np.asarray(phi0(outer.coords()), dtype=np.float64) if callable(phi0) \
        else np.full(outer.shape, float(phi0))
    for t in range(1, T + 1):
        src = LatticeBox(d, radius + T - t + 1)
        dst = LatticeBox(d, radius + T - t)
        with np.errstate(over="raise", invalid="raise"):
            try:
                phi = contract(evaluate(a, t, src) * phi) + evaluate(b, t, dst)
            except FloatingPointError as exc:
                raise NumericOverflowError("fk_solve overflowed; pass log-scale inputs") from exc
    return LatticeField(LatticeBox(d, radius), phi)


def fk_solve_chain(P, phi0, a, b, T):
    """Same recursion for a finite Markov chain with transition matrix P.

    ``a`` and ``b`` map t to a vector over states.
    """
    P = np.asarray(P, dtype=np.float64)
    phi = np.asarray(phi0, dtype=np.float64)
    for t in range(1, T + 1):
        phi = P @ (np.asarray(a(t)) * phi) + np.asarray(b(t))
    return phi


# --- return probabilities -------------------------------------------------

def _log_binom_pmf(n, k, p):
    return gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1) + k * math.log(p) + (n - k) * math.log1p(-p)


@lru_cache(maxsize=32)
def _diagonal_returns_cached(d, t_max):
    t = np.arange(t_max + 1)
    r1 = np.zeros(t_max + 1)
    ev = t[::2]
    r1[::2] = np.exp(gammaln(ev + 1) - 2 * gammaln(ev // 2 + 1) - ev * math.log(2.0))
    r = r1
    for dim in range(2, d + 1):
        nxt = np.zeros(t_max + 1)
        p = 1.0 / dim
        for tt in range(0, t_max + 1, 2):
            k = np.arange(0, tt + 1, 2)
            w = np.exp(_log_binom_pmf(tt, k, p))
            nxt[tt] = np.dot(w * r1[k], r[tt - k])
        r = nxt
    r.setflags(write=False)
    return r


def diagonal_returns(d, t_max):
    """Array of p_t(0, 0) for t = 0..t_max, exact up to rounding.

    Uses the split of t steps among coordinate axes (binomial in the number
    of steps taken along the first axis), so the cost is O(t_max^2) per
    dimension instead of a (2t+1)^d lattice.
    """
    return _diagonal_returns_cached(int(d), int(t_max))


def lclt_constant(d):
    """Limit of p_{2n}(0,0) * n^{d/2}."""
    return 2.0 * (d / (4.0 * math.pi)) ** (d / 2.0)


@dataclass(frozen=True)
class ReturnProbEstimate:
    point: float
    lower: float
    upper: float
    method: str
    details: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (self.lower <= self.point <= self.upper):
            raise ValueError("need lower <= point <= upper")

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, value):
        return self.lower <= value <= self.upper


def _series_return_probability(d, t_max):
    if d <= 2:
        # the decay rate t^{-d/2} is not summable: the Green function diverges
        return ReturnProbEstimate(1.0, 1.0, 1.0, "series-with-tail", {"divergent": True})
    r = diagonal_returns(d, t_max)
    n_last = t_max // 2
    green = float(np.sum(r))
    n = np.arange(max(1, n_last // 2), n_last + 1)
    ratios = r[2 * n] * n ** (d / 2.0)
    monotone = bool(np.all(np.diff(ratios) >= 0))
    c_low = float(ratios[-1]) if monotone else float(ratios.min())
    c_high = max(lclt_constant(d), float(ratios.max()))
    tail_sum = float(zeta(d / 2.0, n_last + 1))
    g_low = green + c_low * tail_sum
    g_high = green + c_high * tail_sum
    lo, hi = 1.0 - 1.0 / g_low, 1.0 - 1.0 / g_high
    mid = 1.0 - 1.0 / (0.5 * (g_low + g_high))
    return ReturnProbEstimate(mid, lo, hi, "series-with-tail", {
        "green_partial": green, "green_low": g_low, "green_high": g_high,
        "t_max": t_max, "ratio_monotone": monotone, "c_low": c_low, "c_high": c_high,
    })


@numba.njit(cache=True)
def _count_returns(d, walks, horizon, seed):
    np.random.seed(seed)
    k = 2 * d
    digits = 0
    base = 1
    while base * k <= (1 << 61) // 1:
        base *= k
        digits += 1
    pos = np.zeros(d, np.int64)
    returned = 0
    for _ in range(walks):
        for j in range(d):
            pos[j] = 0
        l1 = 0
        t = 0
        done = False
        while t < horizon and not done:
            word = np.random.randint(0, base)
            for _j in range(digits):
                r = word % k
                word //= k
                axis = r >> 1
                before = abs(pos[axis])
                if r & 1:
                    pos[axis] += 1
                else:
                    pos[axis] -= 1
                l1 += abs(pos[axis]) - before
                t += 1
                if l1 == 0:
                    returned += 1
                    done = True
                    break
                if t >= horizon:
                    break
    return returned


def _mc_return_probability(d, walks, horizon, seed, confidence=0.99):
    hits = int(_count_returns(d, walks, horizon, seed))
    p = hits / walks
    z = float(norm.ppf(0.5 + confidence / 2))
    se = math.sqrt(max(p * (1 - p), 1.0 / walks) / walks)
    if d <= 2:
        bias = 1.0
    else:
        # returns after the horizon: at most the expected number of visits after it
        bias = lclt_constant(d) * float(zeta(d / 2.0, horizon // 2 + 1))
    return ReturnProbEstimate(p, max(0.0, p - z * se), min(1.0, p + z * se + bias), "monte-carlo", {
        "walks": walks, "horizon": horizon, "returned": hits, "std_error": se,
        "horizon_bias_bound": bias, "seed": seed,
    })


def return_probability(d, t_max=20_000, method="series", walks=1_000_000, horizon=10_000, seed=0):
    """Return probability pi_d of simple random walk, as an interval."""
    if d < 1:
        raise ValueError("d must be >= 1")
    if method == "series":
        if t_max < 2:
            raise ValueError("t_max must be >= 2")
        return _series_return_probability(int(d), int(t_max))
    if method == "monte-carlo":
        return _mc_return_probability(int(d), int(walks), int(horizon), int(seed))
    raise ValueError(f"unknown method {method!r}")


# --- pair walks and renewal sequences -------------------------------------
#
# For independent walks S, S~ from a common start, Y_u = S_u - S~_u is a walk
# with the two-step kernel, so P(Y_n = 0) = p_{2n}(0, 0).  Weights of the form
# alpha^{#visits of Y to 0} only act at the origin, so they are obtained from
# the origin return sequence by renewal at successive visits.

def first_passage(g):
    """h_n from g_n = sum_{k=1}^n h_k g_{n-k} with g_0 = 1 (h_0 = 0)."""
    g = np.asarray(g, dtype=np.float64)
    h = np.zeros_like(g)
    for n in range(1, len(g)):
        h[n] = g[n] - np.dot(h[1:n], g[n - 1:0:-1])
    return h


def renewal_weights(h, alpha):
    """w_n = alpha * sum_{k=1}^n h_k w_{n-k}, w_0 = 1."""
    w = np.zeros(len(h))
    w[0] = 1.0
    for n in range(1, len(h)):
        w[n] = alpha * np.dot(h[1:n + 1], w[n - 1::-1])
    return w


def collision_weights(d, t_max, alpha, conditioned=False, include_origin=False):
    """Vector over t = 0..t_max of the pair-walk collision weight.

    Without ``include_origin`` the exponent counts collisions at times
    1..t: E^{0,0}[alpha^{sum_{u=1}^t 1{S_u = S~_u}}].  With it, times 0..t-1.
    ``conditioned`` restricts to S_t = S~_t (both conventions agree there).
    """
    g = np.asarray(diagonal_returns(d, 2 * t_max)[::2])
    h = first_passage(g)
    with np.errstate(over="ignore"):
        w = renewal_weights(h, alpha)
        if conditioned:
            return w
        survive = 1.0 - np.cumsum(h)
        unc = np.array([np.dot(w[:t + 1], survive[t::-1]) for t in range(t_max + 1)])
        if not include_origin:
            return unc
        out = np.empty(t_max + 1)
        out[0] = 1.0
        out[1:] = alpha * unc[:-1]
        return out


def _collision_lattice(d, t, alpha, include_origin, max_cells):
    check_budget((4 * t + 1) ** d, max_cells, "difference-walk box")
    arr = delta_field(d)
    if include_origin and t > 0:
        arr = arr * alpha
    for u in range(1, t + 1):
        arr = spread(spread(arr))
        if u < t or not include_origin:
            arr[(2 * u,) * d] *= alpha
    return float(arr.sum()), float(arr[(2 * t,) * d])


def collision_weight(d, t, alpha, conditioned=False, include_origin=False, method="renewal",
                     max_cells=DEFAULT_CELL_BUDGET):
    """Pair-walk collision weight at a single time t.

    ``method="lattice"`` runs the DP over the full difference-walk lattice
    (cost (4t+1)^d); ``"renewal"`` uses only the origin return sequence.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if method == "lattice":
        unc, cond = _collision_lattice(d, t, alpha, include_origin, max_cells)
        return cond if conditioned else unc
    if method != "renewal":
        raise ValueError(f"unknown method {method!r}")
    return float(collision_weights(d, t, alpha, conditioned, include_origin)[t])


def collision_limit(alpha, pi):
    """E[alpha^L] for L geometric with P(L >= k) = pi^k; needs alpha * pi < 1."""
    if alpha * pi >= 1:
        return math.inf
    return (1.0 - pi) / (1.0 - alpha * pi)


def characteristic(k):
    """E[exp(i k . xi)] for one step xi of the walk."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    return float(np.mean(np.cos(k)))


def _one_dim_laws(n_max):
    z = np.arange(-n_max, n_max + 1)
    a = np.arange(n_max + 1)[:, None]
    steps_up = (a + z) / 2
    ok = ((a + z) % 2 == 0) & (np.abs(z) <= a)
    logp = np.where(ok, gammaln(a + 1) - gammaln(np.where(ok, steps_up, 0) + 1)
                    - gammaln(np.where(ok, a - steps_up, 0) + 1) - a * math.log(2.0), -np.inf)
    return z, np.exp(logp)


def tilted_returns(d, n_max, k, max_cells=DEFAULT_CELL_BUDGET):
    """g_n = sum_z p_n(0,z)^2 cos(k . z) for n = 0..n_max.

    Exact.  When k has at most one nonzero coordinate the steps are split
    between the tilted axis and the remaining d-1 axes, costing O(n_max^3);
    otherwise the d-dimensional law is propagated on the lattice.
    """
    k = np.asarray(k, dtype=np.float64).reshape(d)
    nz = np.flatnonzero(k)
    if len(nz) == 0:
        return np.array(diagonal_returns(d, 2 * n_max)[::2])
    if len(nz) > 1:
        check_budget((2 * n_max + 1) ** d, max_cells)
        out = np.empty(n_max + 1)
        arr = delta_field(d)
        for n in range(n_max + 1):
            if n:
                arr = spread(arr)
            box = LatticeBox(d, n)
            out[n] = float(np.sum(arr ** 2 * np.cos(box.coords() @ k)))
        return out
    kappa = k[nz[0]]
    z, p1 = _one_dim_laws(n_max)
    c = (p1 * np.cos(kappa * z)) @ p1.T
    if d == 1:
        return np.diag(c).copy()
    rest = np.asarray(diagonal_returns(d - 1, 2 * n_max))
    out = np.empty(n_max + 1)
    for n in range(n_max + 1):
        a = np.arange(n + 1)
        wa = np.exp(_log_binom_pmf(n, a, 1.0 / d))
        idx = 2 * n - a[:, None] - a[None, :]
        out[n] = wa @ (c[:n + 1, :n + 1] * rest[idx]) @ wa
    return out


def pair_character_weights(d, n_max, alpha, a, b, max_cells=DEFAULT_CELL_BUDGET):
    """J_t = E^{0,0}[alpha^{sum_{u=0}^{t-1} 1{S_u = S~_u}} cos(a.S_t + b.S~_t)], t = 0..n_max.

    Renewal at the visits of S - S~ to the origin: the phase is additive
    along the path so it factorizes across excursions.
    """
    a = np.asarray(a, dtype=np.float64).reshape(d)
    b = np.asarray(b, dtype=np.float64).reshape(d)
    g = tilted_returns(d, n_max, a + b, max_cells)
    h = first_passage(g)
    u = (characteristic(a) * characteristic(b)) ** np.arange(n_max + 1)
    r = np.zeros(n_max + 1)
    for s in range(1, n_max + 1):
        r[s] = u[s] - np.dot(h[1:s], u[s - 1:0:-1])
    w = renewal_weights(h, alpha)
    J = np.empty(n_max + 1)
    J[0] = 1.0
    for t in range(1, n_max + 1):
        J[t] = alpha * np.dot(w[:t], r[t:0:-1])
    return J
