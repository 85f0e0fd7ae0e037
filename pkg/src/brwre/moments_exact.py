"""Exact dynamic-programming evaluation of first and second moments.

Second moments follow from the most recent common ancestor decomposition:
two distinct particles at time T descend from siblings born at some
(s + 1, y'), after which their lineages are independent walks that pick up a
factor alpha each time they share a cell.  Counting those shared cells from
the siblings' birth gives collision exponents over u = 0..k-1 for a pair walk
of k = T - 1 - s steps started on the diagonal.
"""

import math

import numpy as np

from .environment import env_moments
from .errors import ResourceLimitError
from .lattice_walk import (DEFAULT_CELL_BUDGET, LatticeBox, LatticeField, check_budget,
                           characteristic, collision_limit, collision_weights, fk_solve,
                           pair_character_weights, return_probability, spread,
                           t_step_distribution)

PAIR_CELL_BUDGET = 20_000_000


# --- quenched means -------------------------------------------------------

def _quenched_forward(env, T, d):
    """Yield (t, values, log_scale) for the unnormalized quenched mean field at t = 1..T.

    The weight m_{u,x} is collected when leaving x at time u; each step is
    rescaled so the stored maximum is 1.
    """
    arr = np.ones((1,) * d)
    log_scale = 0.0
    for u in range(T):
        logm = env.means_on_box(u, LatticeBox(d, u), log=True)
        shift = float(np.max(logm))
        arr = spread(arr * np.exp(logm - shift))
        log_scale += shift
        top = float(arr.max())
        arr /= top
        log_scale += math.log(top)
        yield u + 1, arr, log_scale


def quenched_mean_field(env, T, d, max_cells=DEFAULT_CELL_BUDGET):
    """x -> P^q[N_{T,x}] = E_S[prod_{u<T} m_{u,S_u} : S_T = x], carried in log scale."""
    if T < 1:
        raise ValueError("T must be >= 1")
    check_budget(LatticeBox(d, T).n_cells, max_cells)
    for _, arr, log_scale in _quenched_forward(env, T, d):
        pass
    return LatticeField(LatticeBox(d, T), arr, log_scale)


def quenched_log_totals(env, T, d, max_cells=DEFAULT_CELL_BUDGET):
    """log P^q[N_t] for t = 0..T in one forward pass."""
    check_budget(LatticeBox(d, T).n_cells, max_cells)
    out = np.zeros(T + 1)
    for t, arr, log_scale in _quenched_forward(env, T, d):
        out[t] = log_scale + math.log(arr.sum())
    return out


def quenched_total_backward(env, T, d, max_cells=DEFAULT_CELL_BUDGET):
    """P^q[N_T] through the backward Feynman-Kac recursion (plain doubles).

    phi_t(x) = E^x[m_{T-t+1,S_1} phi_{t-1}(S_1)] with phi_1 = 1, so that
    P^q[N_T] = m_{0,0} phi_T(0).
    """
    if T == 1:
        return float(env.means(0, np.zeros((1, d), dtype=np.int64))[0])

    def a(t, sites):
        if t == 1:
            return np.ones(sites.shape[:-1])
        return env.means(T - t + 1, sites.reshape(-1, d)).reshape(sites.shape[:-1])

    phi = fk_solve(d, 1.0, a, 0.0, T, radius=0, max_cells=max_cells)
    return float(env.means(0, np.zeros((1, d), dtype=np.int64))[0]) * phi.at(np.zeros(d, dtype=np.int64))


# --- pair-walk DP on the joint lattice ------------------------------------

def _pair_spread_same(arr, d):
    """Apply the kernel to both walks of a joint (2d-axis) array, zero outside the box."""
    for walk in range(2):
        out = np.zeros_like(arr)
        for axis in range(walk * d, (walk + 1) * d):
            lo = [slice(None)] * (2 * d)
            hi = [slice(None)] * (2 * d)
            lo[axis] = slice(0, -1)
            hi[axis] = slice(1, None)
            out[tuple(lo)] += arr[tuple(hi)]
            out[tuple(hi)] += arr[tuple(lo)]
        arr = out
    return arr / (2 * d) ** 2


def _diagonal(arr, d):
    letters = "abcdefgh"[:d]
    return np.einsum(f"{letters}{letters}->{letters}", arr)


def _diag_mask(d, width):
    idx = np.indices((width,) * (2 * d), sparse=True)
    mask = np.ones((1,) * (2 * d), dtype=bool)
    for j in range(d):
        mask = mask & (idx[j] == idx[d + j])
    return mask


def pair_backward_terms(d, steps, g0, alpha, radius, max_cells=PAIR_CELL_BUDGET):
    """Diagonals of G_k for k = 0..steps, where G_0 = g0 on the joint box and
    G_k(y, y~) = alpha^{1{y = y~}} E^{y,y~}[G_{k-1}(S_1, S~_1)].

    G_k(y, y) is exact for |y|_inf <= radius - k.
    """
    width = 2 * radius + 1
    check_budget(width ** (2 * d), max_cells, "joint pair box")
    mask = _diag_mask(d, width)
    weight = np.where(mask, alpha, 1.0)
    g = np.asarray(g0, dtype=np.float64)
    out = [_diagonal(g, d).copy()]
    for _ in range(steps):
        g = _pair_spread_same(g, d) * weight
        out.append(_diagonal(g, d).copy())
    return out


def _embed(field, radius):
    """Place a LatticeField of smaller radius at the center of a radius box."""
    d = field.box.dimension
    r = field.box.radius
    out = np.zeros((2 * radius + 1,) * d)
    sl = tuple(slice(radius - r, radius + r + 1) for _ in range(d))
    out[sl] = field.values
    return out


def _joint_values(f, ft, d, radius, scale):
    box = LatticeBox(d, radius)
    pts = box.coords().reshape(-1, d) / scale
    fv = np.asarray(f(pts), dtype=float).reshape(box.shape)
    gv = np.asarray(ft(pts), dtype=float).reshape(box.shape)
    return fv, gv


def _functional_lattice(model, d, T, f, ft, scale, max_cells):
    mom = env_moments(model)
    fv, gv = _joint_values(f, ft, d, T, scale)
    g0 = np.multiply.outer(fv, gv)
    diags = pair_backward_terms(d, T - 1, g0, mom.alpha, T, max_cells)
    diag_term = float(np.sum(t_step_distribution(d, T).values * fv * gv))
    total = math.exp(-T * math.log(mom.m)) * diag_term
    for k in range(T):
        p = _embed(t_step_distribution(d, T - k), T)
        total += mom.c * math.exp((k - T) * math.log(mom.m)) * float(np.sum(p * diags[k]))
    return total


def _cos_terms(f, d):
    terms = getattr(f, "cosine_terms", None)
    if terms is None:
        return None
    return [(float(a), np.asarray(k, dtype=float).reshape(d)) for a, k in terms]


def _trig_pair_term(mom, d, T, a, b, max_cells):
    """Normalized sum over x, x~ of P[N_Tx N_Tx~] cos(a.x + b.x~)."""
    J = pair_character_weights(d, T - 1, mom.alpha, a, b, max_cells)
    phi = characteristic(a + b)
    ln_m = math.log(mom.m)
    total = math.exp(-T * ln_m) * phi ** T
    for k in range(T):
        total += mom.c * math.exp((k - T) * ln_m) * phi ** (T - k) * J[k]
    return total


def second_moment_functional(model, d, T, f, ft, scale=1.0, normalized=True,
                             max_cells=PAIR_CELL_BUDGET):
    """sum_{x,x~} P[N_{T,x} N_{T,x~}] f(x/scale) f~(x~/scale), divided by m^{2T}
    when ``normalized``.

    Test functions exposing ``cosine_terms`` (pairs (coef, theta) with
    f(u) = sum coef cos(theta.u)) go through the pair character recursion, which
    never builds the joint lattice.  Any other callable on site arrays uses the
    joint pair DP, whose (2T+1)^{2d} box limits it to small instances.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    mom = env_moments(model)
    tf, tg = _cos_terms(f, d), _cos_terms(ft, d)
    if tf is not None and tg is not None:
        val = 0.0
        for ca, ka in tf:
            for cb, kb in tg:
                a, b = ka / scale, kb / scale
                val += 0.5 * ca * cb * (_trig_pair_term(mom, d, T, a, b, max_cells)
                                        + _trig_pair_term(mom, d, T, a, -b, max_cells))
    else:
        val = _functional_lattice(model, d, T, f, ft, scale, max_cells)
    if normalized:
        return val
    return val * mom.m ** (2 * T)


def annealed_second_moment(model, d, T, x, xt, max_cells=PAIR_CELL_BUDGET):
    """P[N_{T,x} N_{T,x~}] by the joint pair DP."""
    x = tuple(int(v) for v in np.atleast_1d(x))
    xt = tuple(int(v) for v in np.atleast_1d(xt))
    if len(x) != d or len(xt) != d:
        raise ValueError("sites must have d coordinates")
    if d > 3:
        raise ResourceLimitError("joint pair DP is limited to d <= 3")

    def indicator(site):
        return lambda pts: np.all(np.rint(pts).astype(np.int64) == np.asarray(site), axis=1).astype(float)

    if max(map(abs, x + xt)) > T:
        return 0.0
    return second_moment_functional(model, d, T, indicator(x), indicator(xt), normalized=False,
                                    max_cells=max_cells)


# --- normalized totals ----------------------------------------------------

def pair_weights(d, t_max, alpha, convention="origin"):
    """Unconditioned pair weights indexed by the number of steps k = 0..t_max.

    "origin" counts collisions at u = 0..k-1 (what the lineage decomposition
    produces); "terminal" counts u = 1..k.
    """
    if convention not in ("origin", "terminal"):
        raise ValueError(f"unknown convention {convention!r}")
    return collision_weights(d, t_max, alpha, conditioned=False, include_origin=convention == "origin")


def normalized_second_moments(model, d, T_max, convention="origin"):
    """P[Nbar_T^2] for T = 0..T_max.

    Uses A_{T+1} = (A_T + J_T) / m for A_T = sum_{k<T} m^{k-T} J_k, which
    stays in range for any horizon when m > 1.
    """
    mom = env_moments(model)
    J = pair_weights(d, max(T_max - 1, 0), mom.alpha, convention)
    out = np.empty(T_max + 1)
    acc = 0.0
    for T in range(T_max + 1):
        with np.errstate(over="ignore"):
            out[T] = mom.m ** (-T) + mom.c * acc
        if T < T_max:
            acc = (acc + J[T]) / mom.m
    return out


def normalized_second_moment(model, d, T, convention="origin"):
    """P[Nbar_T^2] = m^-T + c m^-T sum_{k<T} m^k J_k."""
    if T < 0:
        raise ValueError("T must be nonnegative")
    return float(normalized_second_moments(model, d, T, convention)[T])


def second_moment_envelope(model, d, pi=None):
    """Upper bounds on sup_T P[Nbar_T^2] in the L2 regime, evaluated at the
    upper end of the pi_d interval (both increase with pi when alpha >= 1).

    Returns (rigorous, geometric): ``rigorous`` = max(1, c alpha W/(m-1)) follows
    from J_k <= alpha W with W = (1-pi)/(1-alpha pi); ``geometric`` =
    1 + c W/(m-1) is the cruder closed form with the terminal convention.
    """
    mom = env_moments(model)
    if mom.m <= 1:
        return math.inf, math.inf
    if pi is None:
        pi = return_probability(d)
    w = collision_limit(mom.alpha, pi.upper)
    return max(1.0, mom.c * mom.alpha * w / (mom.m - 1)), 1.0 + mom.c * w / (mom.m - 1)


def overlap_bound_series(model, d, T, include_c=True):
    """sum_x P[Nbar_{T,x}^2] = m^-T + c m^-T sum_{k<T} m^k w_k, with w_k the
    conditioned collision weight; ``include_c=False`` drops the factor c."""
    return float(overlap_bound_series_all(model, d, T, include_c)[T])


def overlap_bound_series_all(model, d, T_max, include_c=True):
    mom = env_moments(model)
    w = collision_weights(d, max(T_max - 1, 0), mom.alpha, conditioned=True)
    c = mom.c if include_c else 1.0
    out = np.empty(T_max + 1)
    acc = 0.0
    for T in range(T_max + 1):
        with np.errstate(over="ignore"):
            out[T] = mom.m ** (-T) + c * acc
        if T < T_max:
            acc = (acc + w[T]) / mom.m
    return out


# --- SCLT diagnostic ------------------------------------------------------

def sclt_factorization_check(d, alpha, f, ft, t, integral_f, integral_ft, pi=None,
                             max_cells=PAIR_CELL_BUDGET):
    """(lhs, rhs) with lhs = E^{0,0}[alpha^{sum_{u<t} 1{S_u = S~_u}} f(S_t/sqrt t) f~(S~_t/sqrt t)]
    and rhs = alpha (1-pi)/(1-alpha pi) * int f g_1 * int f~ g_1.

    ``integral_f`` and ``integral_ft`` are the gaussian integrals of f, f~.
    """
    if pi is None:
        pi = return_probability(d)
    if alpha * pi.upper >= 1:
        raise ValueError("need alpha < 1/pi_d")
    scale = math.sqrt(t)
    tf, tg = _cos_terms(f, d), _cos_terms(ft, d)
    if tf is not None and tg is not None:
        lhs = 0.0
        for ca, ka in tf:
            for cb, kb in tg:
                a, b = ka / scale, kb / scale
                lhs += 0.5 * ca * cb * (pair_character_weights(d, t, alpha, a, b, max_cells)[t]
                                        + pair_character_weights(d, t, alpha, a, -b, max_cells)[t])
    else:
        fv, gv = _joint_values(f, ft, d, t, scale)
        diags = pair_backward_terms(d, t, np.multiply.outer(fv, gv), alpha, t, max_cells)
        lhs = float(diags[t][(t,) * d])
    rhs = alpha * collision_limit(alpha, pi.point) * integral_f * integral_ft
    return lhs, rhs
