"""Offspring laws, the environment distribution Q, seeded environment fields
and the moment functionals and phase criteria built from them."""

from dataclasses import dataclass, field
import math
import re

import numpy as np
from scipy.special import gammaln, xlogy
from scipy.stats import poisson as poisson_dist

from ._rng import keyed_uniform
from .errors import ConfigError, InfiniteMomentError, UnsupportedMomentError
from .eta import EtaField, EtaLaw, lambda_derivative, lambda_of_beta, parse_eta_law
from .lattice_walk import return_probability

COMPONENT_STREAM = 7
POISSON_TAIL = 1e-17


def _stirling2_row(p):
    row = [1]
    for n in range(1, p + 1):
        new = [0] * (n + 1)
        for k in range(1, n + 1):
            new[k] = k * (row[k] if k < len(row) else 0) + row[k - 1]
        row = new
    return row


@dataclass(frozen=True)
class OffspringLaw:
    """A law on {0, 1, 2, ...}: finite support (probs[k] = q(k)) or poisson(mu)."""

    kind: str
    probs: tuple = ()
    mu: float = 0.0

    def __post_init__(self):
        if self.kind == "finite":
            p = np.asarray(self.probs, dtype=float)
            if p.ndim != 1 or len(p) == 0:
                raise ConfigError("finite law needs a nonempty probability vector")
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ConfigError(f"finite law probabilities must be >= 0 and sum to 1, got {p.sum()!r}")
        elif self.kind == "poisson":
            if not (self.mu > 0 and math.isfinite(self.mu)):
                raise ConfigError("poisson mean must be finite and positive")
        else:
            raise ConfigError(f"unknown offspring law kind {self.kind!r}")

    @classmethod
    def poisson(cls, mu):
        return cls("poisson", mu=float(mu))

    @classmethod
    def point(cls, k):
        probs = [0.0] * int(k) + [1.0]
        return cls("finite", tuple(probs))

    @classmethod
    def finite(cls, atoms):
        """From a mapping {k: q(k)}."""
        if any(int(k) != k or k < 0 for k in atoms):
            raise ConfigError("offspring counts must be nonnegative integers")
        top = int(max(atoms))
        probs = [0.0] * (top + 1)
        for k, q in atoms.items():
            probs[int(k)] += float(q)
        return cls("finite", tuple(probs))

    @property
    def mean(self):
        return self.moment(1)

    @property
    def max_support(self):
        return len(self.probs) - 1 if self.kind == "finite" else math.inf

    def moment(self, p):
        return law_moment(self, p)

    def pmf(self, tail=POISSON_TAIL):
        """Probability vector over 0..K; poisson laws are cut where the tail drops below ``tail``."""
        if self.kind == "finite":
            return np.asarray(self.probs, dtype=float)
        top = _poisson_top(self.mu, tail)
        return poisson_dist.pmf(np.arange(top + 1), self.mu)

    def pgf(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "poisson":
            return np.exp(self.mu * (s - 1.0))
        return np.polynomial.polynomial.polyval(s, np.asarray(self.probs))

    def spec(self):
        if self.kind == "poisson":
            return f"poisson({self.mu!r})"
        nz = [(k, q) for k, q in enumerate(self.probs) if q > 0]
        if len(nz) == 1:
            return f"point({nz[0][0]})"
        return "finite(" + ",".join(f"{k}:{q!r}" for k, q in nz) + ")"


def _poisson_top(mu, tail):
    """Support cutoff K with P(X > K) <= tail; isf is NaN below double resolution."""
    top = poisson_dist.isf(tail, mu)
    if not math.isfinite(top):
        top = mu + 40.0 * math.sqrt(mu) + 40.0
    return int(top) + 1


def law_moment(law, p):
    """m^{(p)} = sum_k k^p q(k)."""
    if p <= 0:
        raise ValueError("p must be positive")
    if law.kind == "finite":
        k = np.arange(len(law.probs), dtype=float)
        return float(np.dot(k ** p, law.probs))
    mu = law.mu
    if p == 1:
        return mu
    if p == 2:
        return mu + mu * mu
    if float(p).is_integer():
        # Touchard polynomial
        row = _stirling2_row(int(p))
        return float(sum(s * mu ** k for k, s in enumerate(row)))
    if p > 2:
        raise UnsupportedMomentError("non-integer moments above 2 are not supported for poisson laws")
    k = np.arange(1, _poisson_top(mu, POISSON_TAIL) + 1, dtype=float)
    return float(np.sum(np.exp(p * np.log(k) + k * math.log(mu) - mu - gammaln(k + 1))))


@dataclass(frozen=True)
class EnvMoments:
    m: float
    m2: float
    q_m_sq: float
    alpha: float
    c: float


@dataclass(frozen=True)
class EnvironmentModel:
    """Q as a finite mixture of offspring laws, or coupled from an eta law.

    A coupled model assigns poisson(exp(beta * eta_{t,x})) to each cell.  For
    a finite eta law it is also a finite mixture, and ``laws``/``weights``
    are filled in accordingly.
    """

    laws: tuple = ()
    weights: tuple = ()
    eta: EtaLaw = None
    beta: float = 0.0

    def __post_init__(self):
        if self.eta is None:
            if len(self.laws) == 0 or len(self.laws) != len(self.weights):
                raise ConfigError("model needs matching laws and weights")
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ConfigError("mixture weights must be >= 0 and sum to 1")
        elif not math.isfinite(self.beta):
            raise ConfigError("beta must be finite")

    @classmethod
    def single(cls, law):
        return cls((law,), (1.0,))

    @classmethod
    def mixture(cls, pairs):
        """From an iterable of (weight, law)."""
        pairs = list(pairs)
        return cls(tuple(l for _, l in pairs), tuple(float(w) for w, _ in pairs))

    @classmethod
    def coupled(cls, eta, beta):
        beta = float(beta)
        if eta.kind == "finite":
            laws = tuple(OffspringLaw.poisson(math.exp(beta * v)) for v in eta.values)
            return cls(laws, eta.weights, eta, beta)
        return cls((), (), eta, beta)

    @property
    def is_coupled(self):
        return self.eta is not None

    @property
    def is_mixture(self):
        return len(self.laws) > 0

    def component_means(self):
        return np.array([law.mean for law in self.laws]), np.asarray(self.weights, dtype=float)

    def q_mean_power(self, p):
        """Q[m_{t,x}^p]."""
        if self.is_coupled:
            return math.exp(lambda_of_beta(self.eta, p * self.beta))
        mu, w = self.component_means()
        return float(np.dot(w, mu ** p))

    def moment(self, p):
        """m^{(p)} = Q[m^{(p)}_{t,x}]."""
        if self.is_coupled and not self.is_mixture:
            if p == 1:
                return self.q_mean_power(1)
            if p == 2:
                return self.q_mean_power(1) + self.q_mean_power(2)
            raise UnsupportedMomentError("only p in {1, 2} for gaussian-coupled models")
        return float(sum(w * law_moment(l, p) for l, w in zip(self.laws, self.weights)))

    @property
    def mean_degenerate(self):
        """True when Q(m_{t,x} = m) = 1."""
        if self.is_coupled:
            return self.beta == 0 or self.eta.degenerate
        mu, w = self.component_means()
        live = mu[w > 0]
        return bool(np.all(live == live[0]))

    def entropy_ratio(self):
        """Q[(m_{t,x}/m) ln(m_{t,x}/m)]."""
        if self.is_coupled:
            return self.beta * lambda_derivative(self.eta, self.beta) - lambda_of_beta(self.eta, self.beta)
        mu, w = self.component_means()
        r = mu / np.dot(w, mu)
        return float(np.dot(w, xlogy(r, r)))

    def averaged_pgf(self, s):
        """Generating function of the Q-averaged offspring law Q[q_{t,x}(.)]."""
        s = np.asarray(s, dtype=float)
        if self.is_mixture:
            return sum(w * law.pgf(s) for law, w in zip(self.laws, self.weights))
        # gaussian-coupled: Q[exp(m (s - 1))] by Gauss-Hermite quadrature
        x, wq = np.polynomial.hermite_e.hermegauss(80)
        m = np.exp(self.beta * self.eta.sigma * x)
        return np.tensordot(wq / wq.sum(), np.exp(np.multiply.outer(m, s - 1.0)), axes=1)

    def draw_pgfs(self, rng, size):
        """Evaluator s -> G_cell(s) for ``size`` i.i.d. cells drawn from Q."""
        if self.is_mixture:
            idx = rng.choice(len(self.laws), size=size, p=np.asarray(self.weights))

            def pgf(s):
                out = np.empty(np.shape(idx))
                for i, law in enumerate(self.laws):
                    mask = idx == i
                    out[mask] = law.pgf(np.broadcast_to(s, np.shape(idx))[mask])
                return out
            return pgf
        m = np.exp(self.beta * self.eta.sigma * rng.standard_normal(size))
        return lambda s: np.exp(m * (s - 1.0))

    def spec(self):
        if self.is_coupled:
            return f"coupled({self.eta.spec()};{self.beta!r})"
        if len(self.laws) == 1:
            return self.laws[0].spec()
        return " + ".join(f"{w!r}*{law.spec()}" for law, w in zip(self.laws, self.weights))


def env_moments(model):
    """Exact mixture arithmetic for m, m^{(2)}, Q[m^2], alpha and c."""
    m = model.moment(1)
    m2 = model.moment(2)
    qm2 = model.q_mean_power(2)
    if not all(math.isfinite(v) for v in (m, m2, qm2)):
        raise InfiniteMomentError("model has an infinite second moment")
    if m <= 0:
        raise ConfigError("model mean must be positive")
    return EnvMoments(m=m, m2=m2, q_m_sq=qm2, alpha=qm2 / (m * m), c=m2 / m - 1.0)


_LAW_RE = re.compile(r"(?:([0-9.eE+-]+)\*)?(poisson|point|finite)\(([^()]*)\)")


def _parse_law(kind, arg):
    if kind == "poisson":
        return OffspringLaw.poisson(float(arg))
    if kind == "point":
        return OffspringLaw.point(int(arg))
    atoms = {}
    for item in arg.split(","):
        k, q = item.split(":")
        atoms[int(k)] = atoms.get(int(k), 0.0) + float(q)
    return OffspringLaw.finite(atoms)


def parse_model(text):
    """Parse e.g. ``0.5*poisson(2) + 0.5*poisson(4)``, ``point(2)``,
    ``finite(0:0.5,3:0.5)`` or ``coupled(gaussian(1.0);0.5)``."""
    s = text.replace(" ", "")
    try:
        if s.startswith("coupled(") and s.endswith(")"):
            eta_text, beta = s[8:-1].rsplit(";", 1)
            return EnvironmentModel.coupled(parse_eta_law(eta_text), float(beta))
        pos = 0
        pairs = []
        while pos < len(s):
            if pairs:
                if s[pos] != "+":
                    raise ValueError(f"expected '+' at offset {pos}")
                pos += 1
            match = _LAW_RE.match(s, pos)
            if match is None:
                raise ValueError(f"bad law at offset {pos}")
            weight = float(match.group(1)) if match.group(1) else 1.0
            pairs.append((weight, _parse_law(match.group(2), match.group(3))))
            pos = match.end()
        if not pairs:
            raise ValueError("empty model")
    except ValueError as exc:
        raise ConfigError(f"cannot parse model {text!r}: {exc}") from exc
    return EnvironmentModel.mixture(pairs)


@dataclass(frozen=True)
class EnvironmentField:
    """One quenched environment: the law at (t, x) is a pure function of (seed, t, x).

    Nothing is cached; every query recomputes a keyed hash, which is cheap.
    """

    model: EnvironmentModel
    seed: int

    @property
    def eta_field(self):
        return EtaField(self.model.eta, self.seed) if self.model.is_coupled else None

    def component_index(self, t, coords):
        if self.model.is_coupled:
            raise TypeError("coupled fields are indexed by eta values")
        u = keyed_uniform(self.seed, t, coords, COMPONENT_STREAM)
        cum = np.cumsum(self.model.weights)
        return np.minimum(np.searchsorted(cum, u, side="right"), len(cum) - 1)

    def log_means(self, t, coords):
        if self.model.is_coupled:
            return self.model.beta * self.eta_field.values(t, coords)
        mu, _ = self.model.component_means()
        with np.errstate(divide="ignore"):
            return np.log(mu)[self.component_index(t, coords)]

    def means(self, t, coords):
        if self.model.is_coupled:
            return np.exp(self.log_means(t, coords))
        mu, _ = self.model.component_means()
        return mu[self.component_index(t, coords)]

    def law_at(self, t, x):
        x = np.atleast_2d(x)
        if self.model.is_coupled:
            return OffspringLaw.poisson(float(self.means(t, x)[0]))
        return self.model.laws[int(self.component_index(t, x)[0])]

    def means_on_box(self, t, box, log=False):
        pts = box.coords().reshape(-1, box.dimension)
        vals = self.log_means(t, pts) if log else self.means(t, pts)
        return vals.reshape(box.shape)

    def offspring_totals(self, t, coords, n, rng):
        """Sum of n[i, j] independent offspring draws from the law at (t, coords[i]).

        ``n`` has shape (sites, groups).  Exact: poisson sums use the
        superposition identity, finite laws a multinomial over the support.
        """
        n = np.asarray(n, dtype=np.int64)
        out = np.zeros_like(n)
        if self.model.is_coupled:
            lam = n * self.means(t, coords)[:, None]
            return rng.poisson(lam).astype(np.int64)
        idx = self.component_index(t, coords)
        for i, law in enumerate(self.model.laws):
            mask = idx == i
            if not mask.any():
                continue
            sub = n[mask]
            if law.kind == "poisson":
                out[mask] = rng.poisson(sub * law.mu)
            else:
                counts = rng.multinomial(sub, law.probs)
                out[mask] = counts @ np.arange(len(law.probs), dtype=np.int64)
        return out


def couple_from_eta(eta_field, beta):
    """Environment with law poisson(exp(beta * eta_{t,x})) at each cell, sharing the eta seed."""
    return EnvironmentField(EnvironmentModel.coupled(eta_field.law, beta), eta_field.seed)


@dataclass(frozen=True)
class PhaseReport:
    dimension: int
    m: float
    alpha: float
    pi_lower: float
    pi_upper: float
    entropy_ratio: float
    l2_regime: bool
    a1: bool
    a2: bool
    a3: bool
    inconclusive: bool
    subcritical: bool
    labels: tuple = field(default=())

    @property
    def strong_disorder(self):
        return self.a1 or self.a2 or self.a3


def classify_phase(model, d, pi=None):
    """Which of the L2 criterion and the strong-disorder conditions (a1)-(a3) hold.

    ``pi`` is a ReturnProbEstimate; by default the series interval is used.
    The L2 check is interval safe: alpha must sit below 1/pi_upper to count,
    and an alpha between 1/pi_upper and 1/pi_lower is reported inconclusive.
    """
    mom = env_moments(model)
    if pi is None:
        pi = return_probability(d)
    ent = model.entropy_ratio()
    nondeg = not model.mean_degenerate
    subcritical = mom.m <= 1
    l2 = inconclusive = False
    if not subcritical and d >= 3:
        l2 = mom.alpha * pi.upper < 1
        inconclusive = not l2 and mom.alpha * pi.lower < 1
    a1 = d == 1 and nondeg
    a2 = d == 2 and nondeg
    a3 = d >= 3 and ent > math.log(2 * d)
    labels = []
    if subcritical:
        labels.append("subcritical-or-critical mean")
    if l2:
        labels.append("L2-regime")
    if inconclusive:
        labels.append("inconclusive")
    for flag, name in ((a1, "a1"), (a2, "a2"), (a3, "a3")):
        if flag:
            labels.append(f"strong disorder ({name})")
    if not labels:
        labels.append("no criterion applies")
    return PhaseReport(d, mom.m, mom.alpha, pi.lower, pi.upper, ent, l2, a1, a2, a3,
                       inconclusive, subcritical, tuple(labels))
