"""Covert best-arm identification for unit-variance Gaussian bandits."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import TooFewEpisodes, ValidationError
from .exponents import bai_program
from .fractional import dinkelbach
from .models import GaussianBanditModel
from .prob import ActionDist, EffectiveActionDist, kl_gaussian_mixture_batch
from .seqtest import EpisodeResult

logger = logging.getLogger(__name__)

ALPHA_MAX = 1.0 - 1e-9
ALPHA_MIN = 1e-300  # keeps the mass strictly positive


def f_value(a: float, k: int) -> float:
    """exp(K - a) (a / K)^K."""
    return math.exp(k - a + k * math.log(a / k))


def f_inverse(delta: float, k: int, tol: float = 1e-10) -> float:
    """Solve f(a) = delta for a >= K by bisection (f decreases there)."""
    if not 0 < delta <= 1:
        raise ValidationError(f"delta must lie in (0, 1], got {delta}")
    if k < 1:
        raise ValidationError("K must be at least 1")
    lo, hi = float(k), k + 10 * abs(math.log(delta)) + 10
    if delta == 1:
        return lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f_value(mid, k) > delta:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class EmpiricalBandit:
    """Per-arm pull counts and reward sums; arm 0 is the null arm."""

    counts: np.ndarray
    sums: np.ndarray

    @classmethod
    def empty(cls, n_arms: int) -> "EmpiricalBandit":
        return cls(np.zeros(n_arms, dtype=np.int64), np.zeros(n_arms))

    def pull(self, arm: int, reward: float):
        self.counts[arm] += 1
        self.sums[arm] += reward

    @property
    def means(self) -> np.ndarray:
        """Empirical means; unpulled arms read as 0."""
        safe = np.maximum(self.counts, 1)
        return np.where(self.counts > 0, self.sums / safe, 0.0)

    @property
    def effective_pulls(self) -> int:
        return int(self.counts[1:].sum())

    @property
    def all_pulled(self) -> bool:
        return bool(np.all(self.counts[1:] > 0))

    @property
    def best_arm(self) -> int:
        return int(np.argmax(self.means[1:])) + 1


def glr_statistic(emp: EmpiricalBandit) -> float:
    """Closed-form infimum of sum_x T_x D(nu_hat_x || nu'_x) over bandits with another best arm."""
    if not emp.all_pulled:
        return 0.0
    mu = emp.means
    b = emp.best_arm
    tb = emp.counts[b]
    vals = [tb * emp.counts[x] * (mu[b] - mu[x]) ** 2 / (2.0 * (tb + emp.counts[x]))
            for x in range(1, len(mu)) if x != b]
    return float(min(vals))


@dataclass(frozen=True)
class BaiPolicyConfig:
    delta: float = 0.1
    eta: float = 1.0
    zeta_floor: float | None = None
    kappa: float = 0.05
    recompute_period: int = 1
    horizon_const: float = 100_000.0
    n_challengers: int | None = None  # K in the threshold; defaults to the effective arm count
    alpha_floor: float = 0.01  # lower clamp on the mass, as a fraction of the warm-up mass

    def validate(self, n_effective: int) -> "BaiPolicyConfig":
        if not 0 < self.delta < 1:
            raise ValidationError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.eta > 0:
            raise ValidationError(f"eta must be positive, got {self.eta}")
        if not 0 < self.kappa < 0.5:
            raise ValidationError(f"kappa must lie in (0, 0.5), got {self.kappa}")
        if not 0 <= self.alpha_floor <= 1:
            raise ValidationError(f"alpha_floor must lie in [0, 1], got {self.alpha_floor}")
        if int(self.recompute_period) < 1:
            raise ValidationError("recompute_period must be >= 1")
        floor = self.floor(n_effective)
        if floor < 0 or floor * n_effective > 1:
            raise ValidationError(f"zeta_floor {floor} infeasible for {n_effective} arms")
        if self.recompute_period > 1:
            logger.debug("recompute_period=%d: control laws are held between refreshes",
                           self.recompute_period)
        return self

    def floor(self, n_effective: int) -> float:
        return 1e-3 / n_effective if self.zeta_floor is None else float(self.zeta_floor)

    def k(self, n_effective: int) -> int:
        return n_effective if self.n_challengers is None else int(self.n_challengers)

    def warmup_alpha(self) -> float:
        """Mass used until every effective arm has been pulled once."""
        return min(1.0 / abs(math.log(self.delta)), ALPHA_MAX)

    def alpha_floor_value(self) -> float:
        return max(self.alpha_floor * self.warmup_alpha(), ALPHA_MIN)

    def horizon_cap(self) -> int:
        return int(math.ceil(self.horizon_const * math.log(self.delta) ** 2))


def stopping_threshold(emp: EmpiricalBandit, config: BaiPolicyConfig, finv: float | None = None) -> float:
    k = config.k(len(emp.counts) - 1)
    t = emp.effective_pulls
    if finv is None:
        finv = f_inverse(config.delta, k)
    return k * math.log(t * t + t) + finv if t > 0 else finv


class ControlDesigner:
    """Maximizer of the floored covert program for a given empirical bandit.

    The argmax depends on the empirical means only through which arm leads and
    the gap ratios (the numerator is homogeneous in the squared gaps), so
    solutions are cached on that key; with two effective arms the key is the
    leader alone and the cache is exact.
    """

    def __init__(self, willie_eff: np.ndarray, floor: float, solver=None, key_digits: int = 4):
        self.willie_eff = np.asarray(willie_eff, dtype=float)
        self.willie_list = self.willie_eff.tolist()
        self.floor = floor
        self.solver = solver
        self.key_digits = key_digits
        self.cache: dict = {}
        self._chi2: dict = {}

    def key(self, alice_eff):
        mu = list(alice_eff)
        best = max(range(len(mu)), key=lambda i: (mu[i], -i))
        gaps2 = [(mu[best] - m) ** 2 for m in mu]
        top = max(gaps2)
        ratios = tuple(round(g / top, self.key_digits) for g in gaps2) if top > 0 else ()
        return best, ratios

    def lookup(self, alice_eff) -> tuple:
        """Cached argmax as a tuple of floats."""
        key = self.key(alice_eff)
        hit = self.cache.get(key)
        if hit is None:
            best, ratios = key
            if self.solver is not None:
                p = self.solver(np.asarray(alice_eff, float), self.willie_eff, self.floor)
            else:
                # representative means with the cached gap ratios
                rep = 1.0 - np.sqrt(np.asarray(ratios)) if ratios else np.asarray(alice_eff, float)
                p = dinkelbach(bai_program(rep, self.willie_eff), floor=self.floor).pbar
            hit = self.cache[key] = tuple(float(v) for v in p)
        return hit

    def __call__(self, alice_eff) -> np.ndarray:
        return np.array(self.lookup(alice_eff))

    def chi2(self, p) -> float:
        """Chi-square of Willie's output at the mixture mean against N(0, 1)."""
        key = tuple(p)
        val = self._chi2.get(key)
        if val is None:
            m = sum(pi * wi for pi, wi in zip(key, self.willie_list))
            val = self._chi2[key] = math.expm1(m * m)
        return val


def alt_inf_value(p, mu_eff) -> float:
    best = max(range(len(mu_eff)), key=lambda i: (mu_eff[i], -i))
    pb, mb = p[best], mu_eff[best]
    vals = [pb * p[x] * (mb - mu_eff[x]) ** 2 / (pb + p[x])
            for x in range(len(p)) if x != best and pb + p[x] > 0]
    return 0.5 * min(vals) if vals else 0.0


def _mass(config: BaiPolicyConfig, designer: "ControlDesigner", p, mu_eff) -> float:
    logd = abs(math.log(config.delta))
    raw = 2.0 * config.eta / designer.chi2(p) * alt_inf_value(p, mu_eff) / logd
    if raw > ALPHA_MAX:
        logger.debug("effective mass %.3g clamped below 1", raw)
    return min(max(raw, config.alpha_floor_value()), ALPHA_MAX)


def refresh_control(emp: EmpiricalBandit, config: BaiPolicyConfig, designer: ControlDesigner) -> ActionDist:
    """Control law for the next step given the current empirical bandit."""
    k = len(emp.counts) - 1
    if not emp.all_pulled:
        # warm-up: the plug-in mass is 0 while every mean reads 0
        return ActionDist(config.warmup_alpha(), EffectiveActionDist(np.full(k, 1.0 / k)))
    mu = emp.means[1:]
    p = designer(mu)
    alpha = _mass(config, designer, p.tolist(), mu.tolist())
    return ActionDist(alpha, EffectiveActionDist(p, floor=min(designer.floor, float(p.min()))))


class _Block:
    """Buffered draws from a generator; the consumption order is fixed."""

    def __init__(self, rng: np.random.Generator, size: int = 2048):
        self.rng, self.size = rng, size
        self._u, self._iu = rng.random(size).tolist(), 0
        self._z, self._iz = rng.standard_normal(size).tolist(), 0

    def uniform(self) -> float:
        if self._iu == self.size:
            self._u, self._iu = self.rng.random(self.size).tolist(), 0
        v = self._u[self._iu]
        self._iu += 1
        return v

    def normal(self) -> float:
        if self._iz == self.size:
            self._z, self._iz = self.rng.standard_normal(self.size).tolist(), 0
        v = self._z[self._iz]
        self._iz += 1
        return v


def _geometric(u: float, alpha: float) -> int:
    # number of trials up to and including the first success
    if alpha >= 1.0:
        return 1
    return int(math.floor(math.log1p(-u) / math.log1p(-alpha))) + 1


def _glr(counts, means, k) -> tuple[float, int]:
    best = 1
    for x in range(2, k + 1):
        if means[x] > means[best]:
            best = x
    if min(counts[1:]) == 0:
        return 0.0, best
    tb, mb = counts[best], means[best]
    r = math.inf
    for x in range(1, k + 1):
        if x != best:
            tx = counts[x]
            r = min(r, tb * tx * (mb - means[x]) ** 2 / (2.0 * (tb + tx)))
    return r, best


def run_episode(truth: GaussianBanditModel, config: BaiPolicyConfig, rng: np.random.Generator,
                designer: ControlDesigner | None = None, record: bool = False,
                covertness_horizon: int | None = None) -> EpisodeResult:
    """One covert BAI episode, simulated between effective pulls.

    The control law changes only when the empirical bandit does, so the wait
    for the next effective pull is geometric. With ``recompute_period > 1``
    a new law takes effect at the next multiple of the period.
    """
    k = truth.n_effective
    config.validate(k)
    if designer is None:
        designer = ControlDesigner(truth.willie_means[1:], config.floor(k))
    cap = config.horizon_cap()
    kk = config.k(k)
    finv = f_inverse(config.delta, kk)
    period = int(config.recompute_period)
    mu_true = truth.alice_means.tolist()
    draws = _Block(rng)
    counts = [0] * (k + 1)
    sums = [0.0] * (k + 1)
    means = [0.0] * (k + 1)
    warm = (config.warmup_alpha(), tuple([1.0 / k] * k))
    ctrl = warm
    pending = None  # (effective-from time, control)
    segments = []   # (alpha, pbar, first step, last step)
    trace = [] if record else None
    t = 0
    while True:
        if pending is not None and pending[0] <= t:
            ctrl, pending = pending[1], None
        alpha, p = ctrl
        gap = _geometric(draws.uniform(), alpha)
        if pending is not None and t + gap > pending[0]:
            # no effective pull before the refresh lands; memorylessness lets us restart there
            segments.append((alpha, p, t + 1, pending[0]))
            t = pending[0]
            continue
        if t + gap > cap:
            if cap > t:
                segments.append((alpha, p, t + 1, cap))
            result = EpisodeResult(str(truth.best_arm), None, None, True, sum(counts[1:]))
            break
        segments.append((alpha, p, t + 1, t + gap))
        t += gap
        counts[0] += gap - 1
        u = draws.uniform()
        x, acc = k, 0.0
        for i in range(k):
            acc += p[i]
            if u < acc:
                x = i + 1
                break
        y = mu_true[x] + draws.normal()
        counts[x] += 1
        sums[x] += y
        means[x] = sums[x] / counts[x]
        if record:
            trace.append((t, x, y))
        r, best = _glr(counts, means, k)
        tt = t_eff = sum(counts[1:])
        gamma = kk * math.log(tt * tt + tt) + finv
        if r > gamma:
            result = EpisodeResult(str(truth.best_arm), t, str(best), False, t_eff,
                                   extra={"R": r, "Gamma": gamma})
            break
        if min(counts[1:]) == 0:
            new = warm
        else:
            mu = means[1:]
            pb = designer.lookup(mu)
            new = (_mass(config, designer, pb, mu), pb)
        if period == 1:
            ctrl = new
        else:
            nxt = -(-t // period) * period
            if nxt <= t:
                ctrl = new
            else:
                pending = (nxt, new)
    result.action_trace = trace
    per = segment_divergences(segments, truth.willie_means[1:])
    firsts = np.array([sg[2] for sg in segments], dtype=np.int64)
    lasts = np.array([sg[3] for sg in segments], dtype=np.int64)
    result.extra["kl_profile"] = (firsts, lasts, np.cumsum(per))
    result.kl_bound = float(per.sum())
    if covertness_horizon is not None:
        result.kl_bound = kl_until(result, covertness_horizon)
    return result


def segment_divergences(segments, willie_eff) -> np.ndarray:
    """Per-segment sums of D(Willie's conditional output || N(0, 1))."""
    out = np.zeros(len(segments))
    groups: dict = {}
    for i, (alpha, p, first, last) in enumerate(segments):
        groups.setdefault(tuple(p), []).append(i)
    for p, idx in groups.items():
        alphas = np.array([segments[i][0] for i in idx])
        lengths = np.array([segments[i][3] - segments[i][2] + 1 for i in idx], dtype=float)
        out[idx] = kl_gaussian_mixture_batch(alphas, np.asarray(p), willie_eff) * lengths
    return out


def covertness_of_segments(segments, willie_eff, horizon=None) -> float:
    """Sum over steps of D(Willie's conditional output || N(0, 1)) for piecewise-constant controls."""
    if not segments:
        return 0.0
    if horizon is not None:
        segments = [(a, p, f, min(l, horizon)) for a, p, f, l in segments if f <= horizon]
    return float(segment_divergences(segments, willie_eff).sum())


def kl_until(result: EpisodeResult, horizon: float) -> float:
    """Accumulated divergence over the first ``horizon`` steps of a finished episode."""
    first, last, cum = result.extra["kl_profile"]
    if math.isinf(horizon) or horizon >= last[-1]:
        return float(cum[-1])
    i = int(np.searchsorted(last, horizon, side="left"))
    before = cum[i - 1] if i > 0 else 0.0
    if horizon < first[i]:
        return float(before)
    rate = (cum[i] - before) / (last[i] - first[i] + 1)
    return float(before + rate * (horizon - first[i] + 1))


def tau_sup_estimate(stop_times, kappa: float) -> float:
    """Smallest observed a with empirical P(tau > a) < kappa; timeouts count as +inf."""
    times = np.sort(np.asarray([math.inf if s is None else s for s in stop_times], dtype=float))
    n = times.size
    if n < math.ceil(1.0 / kappa - 1e-9):
        raise TooFewEpisodes(f"need at least {math.ceil(1 / kappa)} episodes for kappa={kappa}, got {n}")
    for a in times:
        if np.count_nonzero(times > a) < kappa * n:
            return float(a)
    return math.inf


class CovertBestArmIdentifier(BaseEstimator):
    """Estimator-style front end for covert best-arm identification.

    ``fit`` receives what the agent knows in advance, Willie's arm means (a
    :class:`GaussianBanditModel` works too; its Alice side is ignored).
    ``predict`` returns the empirical best arm of recorded (arms, rewards) traces.
    """

    def __init__(self, delta=0.1, eta=1.0, zeta_floor=None, kappa=0.05, recompute_period=1,
                 horizon_const=100_000.0, n_challengers=None, alpha_floor=0.01):
        self.delta = delta
        self.eta = eta
        self.zeta_floor = zeta_floor
        self.kappa = kappa
        self.recompute_period = recompute_period
        self.horizon_const = horizon_const
        self.n_challengers = n_challengers
        self.alpha_floor = alpha_floor

    def _config(self) -> BaiPolicyConfig:
        return BaiPolicyConfig(self.delta, self.eta, self.zeta_floor, self.kappa,
                               self.recompute_period, self.horizon_const, self.n_challengers,
                               self.alpha_floor)

    def fit(self, willie, y=None):
        wm = willie.willie_means if isinstance(willie, GaussianBanditModel) else np.asarray(willie, float)
        if wm.ndim != 1 or wm.size < 3 or wm[0] != 0:
            raise ValidationError("Willie means must cover the null arm (mean 0) and >= 2 effective arms")
        self.config_ = self._config().validate(wm.size - 1)
        self.willie_means_ = wm
        self.designer_ = ControlDesigner(wm[1:], self.config_.floor(wm.size - 1))
        self.threshold_offset_ = f_inverse(self.config_.delta, self.config_.k(wm.size - 1))
        return self

    def run_episode(self, truth: GaussianBanditModel, rng, record=False) -> EpisodeResult:
        check_is_fitted(self, "config_")
        if not np.array_equal(truth.willie_means, self.willie_means_):
            raise ValidationError("truth bandit's Willie means differ from the fitted ones")
        return run_episode(truth, self.config_, rng, designer=self.designer_, record=record)

    def predict(self, traces):
        check_is_fitted(self, "config_")
        out = []
        for arms, rewards in traces:
            emp = EmpiricalBandit.empty(self.willie_means_.size)
            for x, r in zip(arms, rewards):
                emp.pull(int(x), float(r))
            out.append(emp.best_arm)
        return np.array(out)
