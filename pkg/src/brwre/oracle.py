"""Exhaustive enumeration of tiny d=1 instances.

Independent of the DP routes: offspring sums come from explicit pmf
convolutions, dispersal from binomial splits, and the environment from the
mixture weights.  The configuration N_{t,.} evolves as a Markov chain whose
transition factorizes over occupied sites (the cell (t, x) is only used by
the parents at x at time t), so each site contributes an independent block
(L, R) = (children sent to x-1, children sent to x+1).

Intermediate generations are enumerated atom by atom (full histories, never
merged); the last generation is integrated out exactly through block pmfs.
Poisson laws are cut where the tail drops below 1e-16 and renormalized.
"""

from dataclasses import dataclass, field
import itertools
import math

import numpy as np
from scipy.stats import binom

from .errors import ResourceLimitError

ATOM_BUDGET = 10_000_000
TAIL = 1e-16


def _law_pmf(law):
    p = law.pmf(TAIL)
    return p / p.sum()


class _Convolutions:
    """Cache of j-fold convolution powers of a pmf."""

    def __init__(self, pmf):
        self.powers = [np.array([1.0]), pmf]

    def __getitem__(self, j):
        while len(self.powers) <= j:
            self.powers.append(np.convolve(self.powers[-1], self.powers[1]))
        return self.powers[j]


def _moments(pmf):
    k = np.arange(len(pmf), dtype=float)
    return float(np.dot(k, pmf)), float(np.dot(k * k, pmf))


@dataclass
class _Block:
    """Law of (L, R) produced by n parents at one site."""

    joint: dict = None
    mean: tuple = (0.0, 0.0)
    second: tuple = (0.0, 0.0, 0.0)  # E[L^2], E[R^2], E[L R]
    total_pmf: np.ndarray = None


def _block(components, n, with_joint):
    """``components`` is a list of (weight, _Convolutions)."""
    split = binom.pmf(np.arange(n + 1), n, 0.5)
    el = er = ell = err = elr = 0.0
    joint = {} if with_joint else None
    total = None
    for w, conv in components:
        tot = conv[n]
        total = w * tot if total is None else _add_padded(total, w * tot)
        for j in range(n + 1):
            pl, pr = conv[j], conv[n - j]
            q = w * split[j]
            ml, sl = _moments(pl)
            mr, sr = _moments(pr)
            el += q * ml
            er += q * mr
            ell += q * sl
            err += q * sr
            elr += q * ml * mr
            if with_joint:
                nzl, nzr = np.flatnonzero(pl), np.flatnonzero(pr)
                for a in nzl:
                    for b in nzr:
                        joint[(int(a), int(b))] = joint.get((int(a), int(b)), 0.0) + q * pl[a] * pr[b]
    return _Block(joint, (el, er), (ell, err, elr), total)


def _add_padded(a, b):
    if len(a) < len(b):
        a, b = b, a
    out = a.copy()
    out[:len(b)] += b
    return out


@dataclass
class ExactLawTable:
    """Exact expectations of a tiny instance."""

    T: int
    m: float
    total_probability: float
    n_atoms: int
    mean_field: dict
    second_moments: dict
    total_law: np.ndarray
    # per time t < T: list of (probability, N_t, E[N_{t+1} | atom])
    conditional: list = field(default_factory=list)

    def mean(self, x):
        return self.mean_field.get(int(x), 0.0)

    def second(self, x, xt):
        return self.second_moments.get((int(x), int(xt)), 0.0)

    @property
    def total_mean(self):
        return float(np.dot(np.arange(len(self.total_law)), self.total_law))

    @property
    def total_second(self):
        k = np.arange(len(self.total_law), dtype=float)
        return float(np.dot(k * k, self.total_law))

    @property
    def normalized_second(self):
        return self.total_second / self.m ** (2 * self.T)

    @property
    def sitewise_normalized_second(self):
        return sum(v for (x, y), v in self.second_moments.items() if x == y) / self.m ** (2 * self.T)


def brute_force_oracle(model=None, T=1, quenched=None, atom_budget=ATOM_BUDGET):
    """Enumerate a d=1 instance for T <= 3.

    Annealed by default (fresh cell laws drawn from ``model``); with
    ``quenched`` = callable (t, x) -> OffspringLaw the environment is fixed.
    """
    if not 1 <= T <= 3:
        raise ValueError("oracle supports 1 <= T <= 3")
    if model is None and quenched is None:
        raise ValueError("need a model or a quenched environment")
    cache = {}

    def conv(law):
        key = id(law)
        if key not in cache:
            cache[key] = (law, _Convolutions(_law_pmf(law)))
        return cache[key][1]

    def components(t, x):
        if quenched is not None:
            return [(1.0, conv(quenched(t, x)))]
        return [(w, conv(law)) for law, w in zip(model.laws, model.weights) if w > 0]

    if quenched is None:
        m = float(sum(w * law.mean for law, w in zip(model.laws, model.weights)))
    else:
        m = float("nan")

    block_cache = {}

    def block(t, x, n, with_joint):
        key = (t, x, n, with_joint)
        if key not in block_cache:
            block_cache[key] = _block(components(t, x), n, with_joint)
        return block_cache[key]

    # atoms: (probability, config dict site->count), full histories
    atoms = [(1.0, {0: 1})]
    conditional = []
    for t in range(T):
        conditional.append(_conditional_means(atoms, t, block))
        if t == T - 1:
            break
        new_atoms = []
        for p, cfg in atoms:
            sites = sorted(cfg)
            tables = [list(block(t, x, cfg[x], True).joint.items()) for x in sites]
            if len(new_atoms) + math.prod(len(tb) for tb in tables) > atom_budget:
                raise ResourceLimitError("oracle atom budget exceeded")
            for combo in itertools.product(*tables):
                q = p
                nxt = {}
                for x, ((a, b), pr) in zip(sites, combo):
                    q *= pr
                    if a:
                        nxt[x - 1] = nxt.get(x - 1, 0) + a
                    if b:
                        nxt[x + 1] = nxt.get(x + 1, 0) + b
                new_atoms.append((q, nxt))
        atoms = new_atoms

    t = T - 1
    mean_field = {}
    second = {}
    total_law = np.zeros(1)
    for p, cfg in atoms:
        sites = sorted(cfg)
        bl = [block(t, x, cfg[x], False) for x in sites]
        mean = {}
        cov = {}
        for x, b in zip(sites, bl):
            mean[x - 1] = mean.get(x - 1, 0.0) + b.mean[0]
            mean[x + 1] = mean.get(x + 1, 0.0) + b.mean[1]
            vl = b.second[0] - b.mean[0] ** 2
            vr = b.second[1] - b.mean[1] ** 2
            clr = b.second[2] - b.mean[0] * b.mean[1]
            for key, v in (((x - 1, x - 1), vl), ((x + 1, x + 1), vr), ((x - 1, x + 1), clr),
                           ((x + 1, x - 1), clr)):
                cov[key] = cov.get(key, 0.0) + v
        for x, v in mean.items():
            mean_field[x] = mean_field.get(x, 0.0) + p * v
        for x, y in itertools.product(mean, mean):
            second[(x, y)] = second.get((x, y), 0.0) + p * (mean[x] * mean[y] + cov.get((x, y), 0.0))
        law = np.array([1.0])
        for b in bl:
            law = np.convolve(law, b.total_pmf)
        total_law = _add_padded(total_law, p * law)
    return ExactLawTable(T, m, float(sum(p for p, _ in atoms)), len(atoms), mean_field, second,
                         total_law, conditional)


def _conditional_means(atoms, t, block):
    """For each atom: (probability, N_t, E[N_{t+1} | atom]) by enumerating the step."""
    out = []
    for p, cfg in atoms:
        e = 0.0
        for x, n in cfg.items():
            pmf = block(t, x, n, False).total_pmf
            e += float(np.dot(np.arange(len(pmf)), pmf))
        out.append((p, sum(cfg.values()), e))
    return out


def path_sum_quenched_mean(means, T):
    """P^q[N_{T,x}] for d=1 by summing prod m_{u,S_u} over all 2^T paths.

    ``means`` is a callable (t, x) -> m_{t,x}.  Returns {x: value}.
    """
    out = {}
    for steps in itertools.product((-1, 1), repeat=T):
        x = 0
        w = 1.0
        for u, s in enumerate(steps):
            w *= means(u, x)
            x += s
        out[x] = out.get(x, 0.0) + w / 2 ** T
    return out


def path_sum_fk(phi0, a, b, T, x0=0):
    """Expanded Feynman-Kac representation on Z by path enumeration.

    phi_T(x) = E^x[prod_{s=1}^{T} a_{T-s+1}(S_s) phi0(S_T)]
             + sum_{j=0}^{T-1} E^x[prod_{s=1}^{j} a_{T-s+1}(S_s) b_{T-j}(S_j)].
    """
    total = 0.0
    for steps in itertools.product((-1, 1), repeat=T):
        path = [x0]
        for s in steps:
            path.append(path[-1] + s)
        w = 1.0
        acc = 0.0
        for j in range(T):
            acc += w * b(T - j, path[j])
            w *= a(T - j, path[j + 1])
        acc += w * phi0(path[T])
        total += acc / 2 ** T
    return total


def polymer_partition_paths(eta, beta, T):
    """Z_T = E_S[exp(beta sum_{t<T} eta(t, S_t))] and the endpoint weights for d=1,
    by summing over all 2^T paths.  ``eta`` is a callable (t, x) -> value."""
    z = 0.0
    ends = {}
    for steps in itertools.product((-1, 1), repeat=T):
        x = 0
        h = 0.0
        for u, s in enumerate(steps):
            h += eta(u, x)
            x += s
        w = math.exp(beta * h) / 2 ** T
        z += w
        ends[x] = ends.get(x, 0.0) + w
    return z, ends


def polymer_martingale_check(values, weights, beta, t):
    """Max |E[Zbar_{t+1} | eta on times < t] - Zbar_t| over all eta configurations,
    for a finite eta law on d=1, by exhaustive enumeration of reachable cells."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    lam = math.log(float(np.dot(weights, np.exp(beta * values))))
    past_cells = [(s, x) for s in range(t) for x in range(-s, s + 1, 2)]
    new_cells = [(t, x) for x in range(-t, t + 1, 2)]
    worst = 0.0
    total_p = 0.0
    for past in itertools.product(range(len(values)), repeat=len(past_cells)):
        env = {c: values[i] for c, i in zip(past_cells, past)}
        p_past = float(np.prod([weights[i] for i in past])) if past else 1.0
        zt = polymer_partition_paths(lambda s, x: env[(s, x)], beta, t)[0] * math.exp(-t * lam) \
            if t > 0 else 1.0
        expect = 0.0
        for new in itertools.product(range(len(values)), repeat=len(new_cells)):
            env2 = dict(env)
            env2.update({c: values[i] for c, i in zip(new_cells, new)})
            q = float(np.prod([weights[i] for i in new]))
            z1 = polymer_partition_paths(lambda s, x: env2[(s, x)], beta, t + 1)[0]
            expect += q * z1 * math.exp(-(t + 1) * lam)
        worst = max(worst, abs(expect - zt))
        total_p += p_past
    return worst, total_p
