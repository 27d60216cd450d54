"""Finite categorical and unit-variance Gaussian laws and their divergences.

All logarithms are natural, so every divergence is in nats.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate

from .errors import (
    AbsoluteContinuityViolation,
    AlphabetMismatch,
    NonZeroNullMean,
    ValidationError,
)

SUM_TOL = 1e-12


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Categorical:
    """A distribution over the outcomes ``0 .. len(probs) - 1``.

    The constructor never renormalizes; use :meth:`normalize` for raw weights.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 1 or p.size < 1:
            raise ValidationError("probs must be a nonempty 1-d sequence")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValidationError(f"probabilities must be finite and >= 0, got {p.tolist()}")
        if abs(p.sum() - 1.0) > SUM_TOL:
            raise ValidationError(f"probabilities sum to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def normalize(cls, weights: Sequence[float]) -> "Categorical":
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValidationError("weights must be nonnegative with a positive sum")
        return cls(w / w.sum())

    @classmethod
    def bernoulli(cls, p1: float) -> "Categorical":
        """Law on {0, 1} with P(1) = p1."""
        if not 0.0 <= p1 <= 1.0:
            raise ValidationError(f"Bernoulli parameter {p1} outside [0, 1]")
        return cls([1.0 - p1, p1])

    @property
    def size(self) -> int:
        return self.probs.size

    def __len__(self):
        return self.probs.size

    def __eq__(self, other):
        return isinstance(other, Categorical) and np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash(self.probs.tobytes())

    def __repr__(self):
        return f"Categorical({self.probs.tolist()})"


@dataclass(frozen=True)
class UnitGaussian:
    """N(mean, 1). The variance is fixed by construction."""

    mean: float

    variance = 1.0


@dataclass(frozen=True, eq=False)
class EffectiveActionDist:
    """Distribution over the non-null actions ``1..K`` (stored 0-based)."""

    probs: np.ndarray
    floor: float = 0.0

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 1 or p.size < 1:
            raise ValidationError("effective action distribution must be nonempty")
        if np.any(p < -SUM_TOL) or abs(p.sum() - 1.0) > SUM_TOL:
            raise ValidationError(f"not a distribution over non-null actions: {p.tolist()}")
        if self.floor < 0 or self.floor * p.size > 1 + SUM_TOL:
            raise ValidationError(f"floor {self.floor} infeasible for {p.size} actions")
        if np.any(p < self.floor - SUM_TOL):
            raise ValidationError(f"entries {p.tolist()} fall below the floor {self.floor}")
        object.__setattr__(self, "probs", p)

    @property
    def size(self) -> int:
        return self.probs.size

    def __eq__(self, other):
        return isinstance(other, EffectiveActionDist) and np.array_equal(self.probs, other.probs)

    def __repr__(self):
        return f"EffectiveActionDist({self.probs.tolist()})"


@dataclass(frozen=True, eq=False)
class ActionDist:
    """Full control law over ``{0, 1, .., K}``: null with ``1 - alpha``, else ``alpha * effective``."""

    alpha: float
    effective: EffectiveActionDist
    null_mass: float = field(default=None)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"effective mass {self.alpha} outside [0, 1]")
        null = 1.0 - self.alpha if self.null_mass is None else float(self.null_mass)
        if abs(null + self.alpha - 1.0) > SUM_TOL:
            raise ValidationError("null_mass + alpha must equal 1")
        object.__setattr__(self, "null_mass", null)

    @classmethod
    def idle(cls, n_effective: int) -> "ActionDist":
        return cls(0.0, EffectiveActionDist(np.full(n_effective, 1.0 / n_effective)))

    def full(self) -> np.ndarray:
        """Probabilities indexed by action 0..K."""
        return np.concatenate([[self.null_mass], self.alpha * self.effective.probs])


def _pair(p: Categorical, q: Categorical):
    if p.size != q.size:
        raise AlphabetMismatch(f"alphabet sizes differ: {p.size} vs {q.size}")
    return p.probs, q.probs


def kl_categorical(p: Categorical, q: Categorical) -> float:
    a, b = _pair(p, q)
    support = a > 0
    if np.any(b[support] == 0):
        raise AbsoluteContinuityViolation(f"{p} is not absolutely continuous w.r.t. {q}")
    val = float(np.sum(a[support] * np.log(a[support] / b[support])))
    return max(val, 0.0)


def chi2_categorical(p: Categorical, q: Categorical) -> float:
    a, b = _pair(p, q)
    diff = a - b
    live = diff != 0
    if np.any(b[live] == 0):
        raise AbsoluteContinuityViolation(f"chi-square of {p} against {q} is infinite")
    return float(np.sum(diff[live] ** 2 / b[live]))


def tv_categorical(p: Categorical, q: Categorical) -> float:
    a, b = _pair(p, q)
    return 0.5 * float(np.abs(a - b).sum())


def mixture(weights: Sequence[float], components: Sequence[Categorical]) -> Categorical:
    w = np.asarray(weights, dtype=float)
    if w.size != len(components):
        raise AlphabetMismatch("one weight per component required")
    if np.any(w < 0) or abs(w.sum() - 1.0) > SUM_TOL:
        raise ValidationError(f"mixture weights {w.tolist()} are not a distribution")
    sizes = {c.size for c in components}
    if len(sizes) != 1:
        raise AlphabetMismatch(f"components live on different alphabets: {sorted(sizes)}")
    mixed = w @ np.stack([c.probs for c in components])
    # absorb rounding so the strict constructor accepts the result
    return Categorical(mixed / mixed.sum())


def sample(dist: Categorical, rng: np.random.Generator, size=None):
    """Draw outcome(s) from ``dist`` using the caller's generator."""
    cdf = np.cumsum(dist.probs)
    u = rng.random(size)
    out = np.searchsorted(cdf, u * cdf[-1], side="right")
    out = np.minimum(out, dist.size - 1)
    return int(out) if size is None else out


def kl_unit_gaussian(a: UnitGaussian, b: UnitGaussian) -> float:
    return 0.5 * (a.mean - b.mean) ** 2


def chi2_gaussian_mixture(weights, arm_means, null_mean: float = 0.0) -> float:
    """Chi-square of ``N(sum_x w_x mu_x, 1)`` against ``N(0, 1)``.

    This is the closed form used for the covert bandit exponent: the effective
    arms are summarized by their weighted mean. :func:`chi2_gaussian_mixture_exact`
    gives the chi-square of the genuine mixture.
    """
    if null_mean != 0:
        raise NonZeroNullMean(f"closed form requires a zero null mean, got {null_mean}")
    w = weights.probs if isinstance(weights, EffectiveActionDist) else np.asarray(weights, float)
    m = float(np.dot(w, np.asarray(arm_means, dtype=float)))
    return float(np.expm1(m * m))


def chi2_gaussian_mixture_exact(weights, arm_means) -> float:
    """Chi-square of ``sum_x w_x N(mu_x, 1)`` against ``N(0, 1)``.

    Uses E_phi[(m/phi)^2] = sum_ij w_i w_j exp(mu_i mu_j).
    """
    w = weights.probs if isinstance(weights, EffectiveActionDist) else np.asarray(weights, float)
    mu = np.asarray(arm_means, dtype=float)
    return float(w @ np.expm1(np.outer(mu, mu)) @ w)


def _phi(z):
    return np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)


def chi2_gaussian_quadrature(mean: float) -> float:
    """Adaptive quadrature of the chi-square of N(mean, 1) against N(0, 1)."""
    def integrand(z):
        return (_phi(z - mean) - _phi(z)) ** 2 / _phi(z)

    lo, hi = min(-12.0, 2 * mean - 12.0), max(12.0, 2 * mean + 12.0)
    val, _ = integrate.quad(integrand, lo, hi, epsabs=1e-14, epsrel=1e-12, limit=400,
                            points=[0.0, mean, 2 * mean])
    return val


def _likelihood_ratio(z, alpha, weights, means):
    # density of (1-alpha) N(0,1) + alpha sum_x w_x N(mu_x,1), divided by phi(z)
    z = np.asarray(z, dtype=float)
    mu = np.asarray(means, dtype=float)
    comp = np.exp(np.multiply.outer(z, mu) - 0.5 * mu * mu)
    return (1.0 - alpha) + alpha * (comp @ np.asarray(weights, float))


def _rlogr_minus(r):
    # r log r - r + 1, nonnegative and accurate near r = 1
    r = np.asarray(r, dtype=float)
    d = r - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = r * np.log1p(d) - d
    out = np.where(r > 0, out, 1.0)
    small = np.abs(d) < 1e-4
    if np.any(small):
        ds = d[small]
        out[small] = ds * ds * (0.5 - ds / 6 + ds * ds / 12)
    return out


def kl_gaussian_mixture(alpha: float, weights, means) -> float:
    """D((1-alpha) N(0,1) + alpha sum_x w_x N(mu_x,1) || N(0,1)) by adaptive quadrature."""
    if alpha == 0:
        return 0.0
    w = weights.probs if isinstance(weights, EffectiveActionDist) else np.asarray(weights, float)
    mu = np.asarray(means, dtype=float)
    span = float(np.max(np.abs(mu))) if mu.size else 0.0

    def integrand(z):
        return float(_rlogr_minus(_likelihood_ratio(z, alpha, w, mu))) * _phi(z)

    lim = 12.0 + 2 * span
    brk = sorted(set([0.0, *mu.tolist()]))
    val, _ = integrate.quad(integrand, -lim, lim, epsabs=1e-16, epsrel=1e-11, limit=400, points=brk)
    return max(val, 0.0)


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(80)
_GH_WEIGHTS = _GH_WEIGHTS / np.sqrt(2 * np.pi)


def kl_gaussian_mixture_batch(alphas, weights, means) -> np.ndarray:
    """Vectorized :func:`kl_gaussian_mixture` over an array of effective masses.

    Gauss-Hermite (probabilists', 80 nodes); used on hot paths where one call
    per control refresh would dominate the run time.
    """
    alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
    w = weights.probs if isinstance(weights, EffectiveActionDist) else np.asarray(weights, float)
    mu = np.asarray(means, dtype=float)
    shape = np.exp(np.multiply.outer(_GH_NODES, mu) - 0.5 * mu * mu) @ w - 1.0
    r = 1.0 + np.multiply.outer(alphas, shape)
    return np.maximum(_rlogr_minus(r) @ _GH_WEIGHTS, 0.0)


def derive_stream(master_seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator determined by ``(master_seed, *keys)`` alone.

    Episode streams are derived from their indices, never from scheduling,
    so results do not depend on how work is split across workers.
    """
    seq = np.random.SeedSequence([int(master_seed), *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(seq))
