"""Diagonal-Gaussian and Bernoulli exponential-family numerics.

The latent family used throughout the package is a product of K independent
Gaussians written in natural form, with sufficient statistics ``(z, z**2)``
per dimension and natural parameters ``(lam1, lam2)``.  Its log normalizer

    B(lam) = sum_k  -lam1**2 / (4 lam2) - 0.5 log(-2 lam2)

omits the ``(2 pi)**-0.5`` base measure; densities returned by this module add
``log h(z) = -0.5 log(2 pi)`` per dimension back in so they integrate to one.

Arrays may carry leading batch axes; the last axis is always the latent axis K.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "DomainError",
    "IDENTITY_TOL",
    "QUADRATURE_TOL",
    "LOG_SQRT_2PI",
    "GaussianNaturalParams",
    "GaussianMeanParams",
    "LikelihoodKind",
    "LikelihoodFamily",
    "ConvexFunction",
    "SquaredNorm",
    "NegativeEntropy",
    "GaussianDualLogNormalizer",
    "log_normalizer_b",
    "log_normalizer_terms",
    "natural_to_mean",
    "mean_to_natural",
    "bregman_divergence",
    "dual_b_star",
    "posterior_params",
    "exp_family_log_density",
    "gaussian_log_density",
    "gaussian_sample",
]

# Fixed library tolerances.  Two-path identities (Legendre round trips,
# Fenchel-Young, canonical vs Bregman densities) hold to IDENTITY_TOL;
# closed forms match adaptive quadrature to QUADRATURE_TOL.
IDENTITY_TOL = 1e-10
QUADRATURE_TOL = 1e-6

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DomainError(ValueError):
    """Parameters or points outside the domain of a family."""


def _as_float(name: str, value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class GaussianNaturalParams:
    """Natural parameters of a diagonal Gaussian: coefficients of z and z**2."""

    lam1: np.ndarray
    lam2: np.ndarray

    def __post_init__(self):
        lam1 = _as_float("lam1", self.lam1)
        lam2 = _as_float("lam2", self.lam2)
        if lam1.shape != lam2.shape:
            raise DomainError(f"lam1 shape {lam1.shape} != lam2 shape {lam2.shape}")
        if np.any(lam2 >= 0):
            raise DomainError("lam2 must be strictly negative (non-normalizable Gaussian)")
        lam1.flags.writeable = False
        lam2.flags.writeable = False
        object.__setattr__(self, "lam1", lam1)
        object.__setattr__(self, "lam2", lam2)

    @classmethod
    def from_moments(cls, mean, variance) -> "GaussianNaturalParams":
        mean = np.asarray(mean, dtype=np.float64)
        variance = np.asarray(variance, dtype=np.float64)
        if np.any(variance <= 0):
            raise DomainError("variance must be positive")
        return cls(mean / variance, -0.5 / variance)

    @classmethod
    def standard(cls, k: int) -> "GaussianNaturalParams":
        """Spherical N(0, 1) bias in K dimensions: lam = (0, -1/2)."""
        return cls(np.zeros(k), np.full(k, -0.5))

    @property
    def dim(self) -> int:
        return self.lam1.shape[-1]

    @property
    def mean(self) -> np.ndarray:
        return -self.lam1 / (2.0 * self.lam2)

    @property
    def variance(self) -> np.ndarray:
        return -0.5 / self.lam2

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.lam1, self.lam2], axis=-1)


@dataclass(frozen=True)
class GaussianMeanParams:
    """Mean parameters E[z] and E[z**2] of a diagonal Gaussian."""

    m1: np.ndarray
    m2: np.ndarray

    def __post_init__(self):
        m1 = _as_float("m1", self.m1)
        m2 = _as_float("m2", self.m2)
        if m1.shape != m2.shape:
            raise DomainError(f"m1 shape {m1.shape} != m2 shape {m2.shape}")
        if np.any(m2 - m1 * m1 <= 0):
            raise DomainError("implied variance m2 - m1**2 must be positive")
        m1.flags.writeable = False
        m2.flags.writeable = False
        object.__setattr__(self, "m1", m1)
        object.__setattr__(self, "m2", m2)

    @property
    def variance(self) -> np.ndarray:
        return self.m2 - self.m1 * self.m1

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.m1, self.m2], axis=-1)


def log_normalizer_terms(p: GaussianNaturalParams) -> np.ndarray:
    """Per-dimension terms of B(lam); shape matches ``p.lam1``."""
    return -p.lam1**2 / (4.0 * p.lam2) - 0.5 * np.log(-2.0 * p.lam2)


def log_normalizer_b(p: GaussianNaturalParams):
    """B(lam) summed over the latent axis.  Returns a float for unbatched params."""
    total = log_normalizer_terms(p).sum(axis=-1)
    return float(total) if np.ndim(total) == 0 else total


def natural_to_mean(p: GaussianNaturalParams) -> GaussianMeanParams:
    m1 = -p.lam1 / (2.0 * p.lam2)
    return GaussianMeanParams(m1, m1 * m1 - 1.0 / (2.0 * p.lam2))


def mean_to_natural(m: GaussianMeanParams) -> GaussianNaturalParams:
    var = m.variance
    return GaussianNaturalParams(m.m1 / var, -1.0 / (2.0 * var))


def dual_b_star(m: GaussianMeanParams):
    """Convex conjugate B*(m) = <m, lam(m)> - B(lam(m))."""
    lam = mean_to_natural(m)
    inner = (m.m1 * lam.lam1 + m.m2 * lam.lam2).sum(axis=-1)
    out = inner - log_normalizer_terms(lam).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def posterior_params(bias: GaussianNaturalParams, t1, t2) -> GaussianNaturalParams:
    """Conjugate update lam~ = lam + t.  Broadcasts a batch of statistics over the bias."""
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    lam2 = bias.lam2 + t2
    if np.any(lam2 >= 0):
        bad = np.argwhere(np.broadcast_to(lam2 >= 0, lam2.shape))[0]
        raise DomainError(
            f"posterior lam2 non-negative at index {tuple(int(i) for i in bad)}; "
            "encoder second statistic violates the normalizability constraint"
        )
    return GaussianNaturalParams(bias.lam1 + t1, lam2)


def gaussian_log_density(p: GaussianNaturalParams, z) -> np.ndarray:
    """Normalized log N(z | p), summed over the latent axis (broadcasting)."""
    z = np.asarray(z, dtype=np.float64)
    terms = p.lam1 * z + p.lam2 * z * z - log_normalizer_terms(p) - LOG_SQRT_2PI
    return terms.sum(axis=-1)


def gaussian_sample(p: GaussianNaturalParams, rng: np.random.Generator) -> np.ndarray:
    m = natural_to_mean(p)
    return m.m1 + np.sqrt(m.variance) * rng.standard_normal(m.m1.shape)


# --------------------------------------------------------------------------
# Convex functions for Bregman divergences


class ConvexFunction:
    """Strictly convex F with value and gradient on its domain."""

    def check_domain(self, mu: np.ndarray) -> None:
        pass

    def value(self, mu: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, mu: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SquaredNorm(ConvexFunction):
    """F(mu) = <mu, mu>; the divergence is squared Euclidean distance."""

    def value(self, mu):
        return float(mu @ mu)

    def grad(self, mu):
        return 2.0 * mu


class NegativeEntropy(ConvexFunction):
    """F(mu) = sum mu log mu on the positive orthant; KL on the simplex."""

    def check_domain(self, mu):
        if np.any(mu <= 0):
            raise DomainError("negative entropy requires strictly positive entries")

    def value(self, mu):
        return float(np.sum(mu * np.log(mu)))

    def grad(self, mu):
        return np.log(mu) + 1.0


class GaussianDualLogNormalizer(ConvexFunction):
    """B* on the stacked mean vector ``[m1..., m2...]`` of a diagonal Gaussian."""

    @staticmethod
    def _split(mu):
        k = mu.shape[-1] // 2
        if mu.shape[-1] != 2 * k:
            raise DomainError("stacked Gaussian mean vector must have even length")
        return mu[..., :k], mu[..., k:]

    def check_domain(self, mu):
        m1, m2 = self._split(mu)
        if np.any(m2 - m1 * m1 <= 0):
            raise DomainError("point outside the Gaussian mean-parameter space")

    def value(self, mu):
        return dual_b_star(GaussianMeanParams(*self._split(mu)))

    def grad(self, mu):
        return mean_to_natural(GaussianMeanParams(*self._split(mu))).stacked()


def bregman_divergence(f: ConvexFunction, mu_a, mu_b) -> float:
    """D_F(a, b) = F(a) - F(b) - <a - b, grad F(b)>, clipped at zero against roundoff."""
    a = _as_float("mu_a", mu_a)
    b = _as_float("mu_b", mu_b)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch {a.shape} vs {b.shape}")
    f.check_domain(a)
    f.check_domain(b)
    d = f.value(a) - f.value(b) - float((a - b) @ f.grad(b))
    return max(d, 0.0)


# --------------------------------------------------------------------------
# Likelihood families with t(x) = x


class LikelihoodKind(str, Enum):
    GAUSSIAN_FIXED_VARIANCE = "gaussian-fixed-variance"
    BERNOULLI = "bernoulli"


@dataclass(frozen=True)
class LikelihoodFamily:
    """Gaussian with known variance or Bernoulli, both with sufficient statistic x.

    ``eta`` is the natural parameter vector; for the Gaussian it is mean/variance,
    for the Bernoulli the logit.
    """

    kind: LikelihoodKind
    eta: np.ndarray
    variance: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LikelihoodKind(self.kind))
        object.__setattr__(self, "eta", _as_float("eta", self.eta))
        if self.kind is LikelihoodKind.GAUSSIAN_FIXED_VARIANCE and not self.variance > 0:
            raise DomainError("fixed variance must be positive")

    @classmethod
    def bernoulli_from_mean(cls, p) -> "LikelihoodFamily":
        p = np.asarray(p, dtype=np.float64)
        if np.any((p <= 0) | (p >= 1)):
            raise DomainError("Bernoulli mean must lie strictly inside (0, 1)")
        return cls(LikelihoodKind.BERNOULLI, np.log(p) - np.log1p(-p))

    def log_normalizer(self) -> float:
        if self.kind is LikelihoodKind.BERNOULLI:
            return float(np.sum(np.logaddexp(0.0, self.eta)))
        return float(0.5 * self.variance * np.sum(self.eta**2))

    def mean(self) -> np.ndarray:
        if self.kind is LikelihoodKind.BERNOULLI:
            return 1.0 / (1.0 + np.exp(-self.eta))
        return self.variance * self.eta

    def dual(self, mu) -> float:
        """A*(mu).  For the Bernoulli this is the binary negative entropy, 0 log 0 = 0."""
        mu = np.asarray(mu, dtype=np.float64)
        if self.kind is LikelihoodKind.BERNOULLI:
            if np.any((mu < 0) | (mu > 1)):
                raise DomainError("Bernoulli mean parameter outside [0, 1]")
            with np.errstate(divide="ignore", invalid="ignore"):
                a = np.where(mu > 0, mu * np.log(np.where(mu > 0, mu, 1.0)), 0.0)
                b = np.where(mu < 1, (1 - mu) * np.log(np.where(mu < 1, 1 - mu, 1.0)), 0.0)
            return float(np.sum(a + b))
        return float(np.sum(mu**2) / (2.0 * self.variance))

    def dual_grad(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=np.float64)
        if self.kind is LikelihoodKind.BERNOULLI:
            return np.log(mu) - np.log1p(-mu)
        return mu / self.variance

    def log_base_measure(self, x) -> float:
        if self.kind is LikelihoodKind.BERNOULLI:
            return 0.0
        x = np.asarray(x, dtype=np.float64)
        return float(np.sum(-0.5 * x**2 / self.variance - 0.5 * np.log(2 * np.pi * self.variance)))

    def check_point(self, x) -> np.ndarray:
        x = _as_float("point", x)
        if x.shape != self.eta.shape:
            raise DomainError(f"point shape {x.shape} != parameter shape {self.eta.shape}")
        if self.kind is LikelihoodKind.BERNOULLI and not np.all((x == 0) | (x == 1)):
            raise DomainError("Bernoulli point must lie in {0, 1}")
        return x


def _gaussian_latent_log_density(p: GaussianNaturalParams, z, mode: str) -> float:
    z = _as_float("point", z)
    if z.shape != p.lam1.shape:
        raise DomainError(f"point shape {z.shape} != parameter shape {p.lam1.shape}")
    log_h = -LOG_SQRT_2PI * z.size
    t1, t2 = z, z * z
    if mode == "canonical":
        inner = float(np.sum(t1 * p.lam1 + t2 * p.lam2))
        return inner - log_normalizer_b(p) + log_h
    # t(z) = (z, z**2) sits on the boundary of the mean space where B* is
    # infinite, so -D(t, mu) + B*(t) is evaluated in its cancelled form
    # B*(mu) + <t - mu, grad B*(mu)>.
    mu = natural_to_mean(p)
    grad = mean_to_natural(mu)
    linear = float(np.sum((t1 - mu.m1) * grad.lam1 + (t2 - mu.m2) * grad.lam2))
    return dual_b_star(mu) + linear + log_h


def exp_family_log_density(fam, point, mode: str = "canonical") -> float:
    """Normalized log density through either the canonical or the Bregman route.

    ``fam`` is a LikelihoodFamily (t(x) = x) or GaussianNaturalParams for the
    latent Gaussian with t(z) = (z, z**2).  The two modes agree to IDENTITY_TOL.
    """
    if mode not in ("canonical", "bregman"):
        raise ValueError(f"unknown mode {mode!r}")
    if isinstance(fam, GaussianNaturalParams):
        return _gaussian_latent_log_density(fam, point, mode)
    x = fam.check_point(point)
    if mode == "canonical":
        return float(x @ fam.eta) - fam.log_normalizer() + fam.log_base_measure(x)
    mu = fam.mean()
    divergence = fam.dual(x) - fam.dual(mu) - float((x - mu) @ fam.dual_grad(mu))
    return -divergence + fam.dual(x) + fam.log_base_measure(x)
