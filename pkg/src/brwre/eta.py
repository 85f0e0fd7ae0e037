"""Laws and seeded fields for the polymer environment eta_{t,x}."""

from dataclasses import dataclass
import math

import numpy as np
from scipy.special import logsumexp

from ._rng import keyed_normal, keyed_uniform
from .errors import ConfigError

ETA_STREAM = 11


@dataclass(frozen=True)
class EtaLaw:
    """Either a finite real law (values, weights) or a centered gaussian of scale sigma."""

    kind: str
    values: tuple = ()
    weights: tuple = ()
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind == "finite":
            if len(self.values) == 0 or len(self.values) != len(self.weights):
                raise ConfigError("finite eta law needs matching values and weights")
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ConfigError("eta weights must be nonnegative and sum to 1")
            if not all(math.isfinite(v) for v in self.values):
                raise ConfigError("eta values must be finite")
        elif self.kind == "gaussian":
            if not (self.sigma > 0 and math.isfinite(self.sigma)):
                raise ConfigError("gaussian sigma must be positive")
        else:
            raise ConfigError(f"unknown eta law kind {self.kind!r}")

    @classmethod
    def gaussian(cls, sigma=1.0):
        return cls("gaussian", sigma=float(sigma))

    @classmethod
    def finite(cls, values, weights):
        return cls("finite", tuple(float(v) for v in values), tuple(float(w) for w in weights))

    @classmethod
    def two_point(cls, a=-1.0, b=1.0, p=0.5):
        return cls.finite((a, b), (1.0 - p, p))

    @property
    def degenerate(self):
        if self.kind == "gaussian":
            return False
        w = np.asarray(self.weights)
        return len(set(v for v, q in zip(self.values, w) if q > 0)) <= 1

    def spec(self):
        if self.kind == "gaussian":
            return f"gaussian({self.sigma!r})"
        return "finite(" + ",".join(f"{v!r}:{w!r}" for v, w in zip(self.values, self.weights)) + ")"


def lambda_of_beta(law, beta):
    """Log moment generating function ln Q[exp(beta * eta)]."""
    if law.kind == "gaussian":
        return 0.5 * (beta * law.sigma) ** 2
    v = np.asarray(law.values)
    w = np.asarray(law.weights)
    return float(logsumexp(beta * v, b=w))


def lambda_derivative(law, beta):
    """d lambda / d beta, the tilted mean of eta."""
    if law.kind == "gaussian":
        return beta * law.sigma ** 2
    v = np.asarray(law.values)
    w = np.asarray(law.weights)
    logw = np.log(np.where(w > 0, w, 1.0)) + beta * v
    logw[w == 0] = -np.inf
    tilt = np.exp(logw - logsumexp(logw))
    return float(np.dot(tilt, v))


@dataclass(frozen=True)
class EtaField:
    """eta_{t,x} as a pure function of (seed, t, x)."""

    law: EtaLaw
    seed: int

    def values(self, t, coords):
        coords = np.atleast_2d(np.asarray(coords, dtype=np.int64))
        if self.law.kind == "gaussian":
            return self.law.sigma * keyed_normal(self.seed, t, coords, ETA_STREAM)
        u = keyed_uniform(self.seed, t, coords, ETA_STREAM)
        cum = np.cumsum(self.law.weights)
        idx = np.minimum(np.searchsorted(cum, u, side="right"), len(cum) - 1)
        return np.asarray(self.law.values)[idx]

    def on_box(self, t, box):
        pts = box.coords().reshape(-1, box.dimension)
        return self.values(t, pts).reshape(box.shape)


def parse_eta_law(text):
    """Parse ``gaussian(s)`` or ``finite(v:p, ...)``."""
    s = text.strip().replace(" ", "")
    try:
        if s.startswith("gaussian(") and s.endswith(")"):
            return EtaLaw.gaussian(float(s[9:-1]) if s[9:-1] else 1.0)
        if s.startswith("finite(") and s.endswith(")"):
            pairs = [p.split(":") for p in s[7:-1].split(",")]
            return EtaLaw.finite([float(v) for v, _ in pairs], [float(w) for _, w in pairs])
    except ValueError as exc:
        raise ConfigError(f"cannot parse eta law {text!r}: {exc}") from exc
    raise ConfigError(f"cannot parse eta law {text!r}")
