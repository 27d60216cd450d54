"""Covert active sequential hypothesis testing.

The agent draws actions from a per-hypothesis control law indexed by the
current maximum-likelihood estimate, mostly idling, and stops once some
hypothesis beats every other by its pairwise threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import BudgetTooSmall, SteppedAfterStop, ValidationError
from .exponents import ht_program
from .fractional import dinkelbach
from .models import HypothesisModel
from .prob import ActionDist, EffectiveActionDist


def solve_control(model: HypothesisModel, theta) -> np.ndarray:
    """Default exponent solver: covert argmax over non-null actions for ``theta``."""
    return dinkelbach(ht_program(model, theta)).pbar


@dataclass(frozen=True, eq=False)
class SeqTestPolicy:
    model: HypothesisModel
    n: int
    eta: float
    zeta: float
    pbar: np.ndarray          # (hypothesis, effective action)
    alpha: np.ndarray         # (hypothesis,)
    thresholds: np.ndarray    # (hypothesis, hypothesis); diagonal is nan
    chi2: np.ndarray          # (hypothesis,) chi-square of each design mixture
    horizon_cap: int
    dummy: bool = False

    def control(self, theta_index: int) -> ActionDist:
        return ActionDist(float(self.alpha[theta_index]),
                          EffectiveActionDist(self.pbar[theta_index]))

    @property
    def leading_covertness(self) -> np.ndarray:
        """n * alpha^2 * chi2 / 2 per hypothesis; equals eta by construction."""
        return self.n * self.alpha ** 2 * self.chi2 / 2.0

    def to_json(self) -> dict:
        labels = self.model.labels
        return {
            "n": self.n, "eta": self.eta, "zeta": self.zeta, "horizon_cap": self.horizon_cap,
            "dummy": self.dummy,
            "alpha": dict(zip(labels, self.alpha.tolist())),
            "pbar": {lab: self.pbar[i].tolist() for i, lab in enumerate(labels)},
            "thresholds": {lab: {o: float(self.thresholds[i, j]) for j, o in enumerate(labels) if j != i}
                           for i, lab in enumerate(labels)},
            "leading_covertness": dict(zip(labels, self.leading_covertness.tolist())),
        }


def build_policy(model: HypothesisModel, n: int, eta: float, zeta: float, solver=solve_control,
                 horizon_factor: int = 4, dummy: bool = False, pbars=None) -> SeqTestPolicy:
    """Control laws, effective masses and stopping thresholds for budget ``n``.

    ``solver(model, theta)`` returns the design distribution over effective
    actions; ``pbars`` (hypothesis -> distribution) bypasses it.
    """
    if int(n) != n or n < 1:
        raise ValidationError(f"time budget must be a positive integer, got {n}")
    if not eta > 0:
        raise ValidationError(f"covertness budget must be positive, got {eta}")
    if not zeta > 0:
        raise ValidationError(f"threshold slack must be positive, got {zeta}")
    n = int(n)
    h, k = model.n_hypotheses, model.n_effective
    pbar = np.zeros((h, k))
    alpha = np.zeros(h)
    chi2 = np.zeros(h)
    thresholds = np.full((h, h), np.nan)
    for i, lab in enumerate(model.labels):
        p = np.asarray(pbars[lab] if pbars is not None else solver(model, lab), dtype=float)
        p = np.clip(p, 0, None)
        p /= p.sum()
        prog = ht_program(model, lab)
        chi = float(prog.chi2(p))
        if chi <= 0:
            raise BudgetTooSmall(f"design mixture for {lab!r} is invisible to Willie")
        a = math.sqrt(2 * eta) / (math.sqrt(n) * math.sqrt(chi))
        if a > 1:
            raise BudgetTooSmall(f"effective mass {a:.4g} > 1 for {lab!r}: increase n or lower eta")
        pbar[i], alpha[i], chi2[i] = p, a, chi
        for j in range(h):
            if j == i:
                continue
            gamma = n * a * (float(model.divergences[i, j, 1:] @ p) - zeta)
            if gamma <= 0:
                raise BudgetTooSmall(f"threshold for ({lab}, {model.labels[j]}) is {gamma:.4g} <= 0; "
                                     "zeta exceeds the design divergence")
            thresholds[i, j] = gamma
    for arr in (pbar, alpha, chi2, thresholds):
        arr.setflags(write=False)
    return SeqTestPolicy(model, n, float(eta), float(zeta), pbar, alpha, thresholds, chi2,
                         int(horizon_factor * n), bool(dummy))


def _log_table(model: HypothesisModel) -> np.ndarray:
    return model.log_alice


@dataclass
class SeqTestState:
    loglik: np.ndarray
    action_counts: np.ndarray
    t: int = 0
    ml_estimate: int = 0
    stopped: bool = False

    @classmethod
    def initial(cls, policy: SeqTestPolicy) -> "SeqTestState":
        return cls(np.zeros(policy.model.n_hypotheses), np.zeros(policy.model.n_actions, dtype=np.int64))

    @property
    def pairwise_llr(self) -> np.ndarray:
        """``A[i, j]``: log-likelihood ratio of hypothesis i against j so far."""
        return self.loglik[:, None] - self.loglik[None, :]

    @property
    def effective_pulls(self) -> int:
        return int(self.action_counts[1:].sum())


def _ml(loglik: np.ndarray) -> int:
    # argmax returns the first maximizer, i.e. the lowest label on ties
    return int(np.argmax(loglik))


def stop_winner(policy: SeqTestPolicy, loglik: np.ndarray):
    """Index of a hypothesis beating every other by its threshold, else None."""
    llr = loglik[:, None] - loglik[None, :]
    ok = (llr >= policy.thresholds) | np.eye(len(loglik), dtype=bool)
    winners = np.flatnonzero(ok.all(axis=1))
    return int(winners[0]) if winners.size else None


def _draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    return min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), probs.size - 1)


def update(policy: SeqTestPolicy, state: SeqTestState, action: int, obs: int) -> SeqTestState:
    """Apply one (action, Alice observation) pair; null actions leave the statistics alone."""
    if state.stopped:
        raise SteppedAfterStop("the policy has stopped; only null actions may follow")
    state.t += 1
    state.action_counts[action] += 1
    if action != 0:
        state.loglik = state.loglik + _log_table(policy.model)[:, action, obs]
        state.ml_estimate = _ml(state.loglik)
        if not policy.dummy and stop_winner(policy, state.loglik) is not None:
            state.stopped = True
    return state


def step(policy: SeqTestPolicy, state: SeqTestState, truth, rng: np.random.Generator):
    """Advance one time step under hypothesis ``truth``.

    Returns ``(state, action, alice_obs, willie_obs)``.
    """
    if state.stopped:
        raise SteppedAfterStop("the policy has stopped; only null actions may follow")
    model = policy.model
    ti = model.index(truth)
    ctrl = policy.control(state.ml_estimate).full()
    x = _draw(ctrl, rng)
    y = _draw(model.alice[ti, x], rng)
    z = _draw(model.willie[ti, x], rng)
    update(policy, state, x, y)
    return state, x, y, z


@dataclass
class EpisodeResult:
    truth: str
    stop_time: int | None
    decision: str | None
    timeout: bool
    effective_pulls: int
    kl_bound: float = 0.0
    action_trace: list | None = None
    willie_trace: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def correct(self) -> bool:
        return self.decision is not None and self.decision == self.truth


def per_step_divergences(policy: SeqTestPolicy, truth_index: int) -> np.ndarray:
    """D(Willie output under the control indexed by each estimate || idle law), truth fixed."""
    from .prob import kl_categorical, Categorical

    w = policy.model.willie[truth_index]
    out = np.zeros(policy.model.n_hypotheses)
    for j in range(policy.model.n_hypotheses):
        mix = policy.control(j).full() @ w
        out[j] = kl_categorical(Categorical(mix / mix.sum()), Categorical(w[0]))
    return out


def run_episode(policy: SeqTestPolicy, truth, rng: np.random.Generator, record: bool = False,
                horizon_cap: int | None = None) -> EpisodeResult:
    """One episode, simulated between effective actions.

    Null steps leave every statistic untouched, so the wait for the next
    effective action is drawn as a geometric variable with the current
    effective mass. ``kl_bound`` accumulates the per-step divergence of
    Willie's conditional output over the first ``n`` steps.
    """
    model = policy.model
    ti = model.index(truth)
    cap = policy.horizon_cap if horizon_cap is None else int(horizon_cap)
    if policy.dummy:
        cap = policy.n
    logtab = _log_table(model)
    step_kl = per_step_divergences(policy, ti)
    cdfs = np.cumsum(policy.pbar, axis=1)
    obs_cdf = np.cumsum(model.alice[ti], axis=1)
    loglik = np.zeros(model.n_hypotheses)
    ml, t, pulls, kl = 0, 0, 0, 0.0
    n = policy.n
    trace = [] if record else None
    while True:
        a = float(policy.alpha[ml])
        gap = int(rng.geometric(a)) if a > 0 else cap + 1
        kl += step_kl[ml] * (min(t + gap, n, cap) - min(t, n, cap))
        if t + gap > cap:
            if policy.dummy:
                return EpisodeResult(truth, cap, model.labels[ml], False, pulls, kl, trace)
            return EpisodeResult(truth, None, None, True, pulls, kl, trace)
        t += gap
        x = 1 + min(int(np.searchsorted(cdfs[ml], rng.random() * cdfs[ml, -1], side="right")),
                    model.n_effective - 1)
        y = min(int(np.searchsorted(obs_cdf[x], rng.random() * obs_cdf[x, -1], side="right")),
                obs_cdf.shape[1] - 1)
        loglik += logtab[:, x, y]
        pulls += 1
        ml = _ml(loglik)
        if record:
            trace.append((t, x))
        if not policy.dummy and stop_winner(policy, loglik) is not None:
            return EpisodeResult(truth, t, model.labels[ml], False, pulls, kl, trace)


def run_episode_stepwise(policy: SeqTestPolicy, truth, rng: np.random.Generator) -> EpisodeResult:
    """Reference loop calling :func:`step` once per time step (slow)."""
    state = SeqTestState.initial(policy)
    cap = policy.n if policy.dummy else policy.horizon_cap
    while state.t < cap:
        step(policy, state, truth, rng)
        if state.stopped:
            return EpisodeResult(truth, state.t, policy.model.labels[state.ml_estimate], False,
                                 state.effective_pulls)
    if policy.dummy:
        return EpisodeResult(truth, cap, policy.model.labels[state.ml_estimate], False,
                             state.effective_pulls)
    return EpisodeResult(truth, None, None, True, state.effective_pulls)


def willie_observations(policy: SeqTestPolicy, truth, action_trace, k: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Willie's first ``k`` outputs given the effective-action trace of an episode.

    Steps absent from the trace (idle, or after stopping) emit from the idle law.
    """
    ti = policy.model.index(truth)
    w = policy.model.willie[ti]
    actions = np.zeros(k, dtype=np.int64)
    for t, x in action_trace:
        if t <= k:
            actions[t - 1] = x
    cdf = np.cumsum(w, axis=1)[actions]
    u = rng.random(k) * cdf[:, -1]
    z = np.count_nonzero(cdf <= u[:, None], axis=1)
    return np.minimum(z, w.shape[1] - 1)


class CovertSequentialTest(BaseEstimator):
    """Estimator-style front end for the covert sequential test.

    ``fit(model)`` builds the policy (``policy_``); ``predict`` applies the
    final decision rule (maximum likelihood, lowest label on ties) to
    recorded traces.
    """

    def __init__(self, n=10_000, eta=0.5, zeta=0.01, horizon_factor=4, dummy=False,
                 regularize_null=None):
        self.n = n
        self.eta = eta
        self.zeta = zeta
        self.horizon_factor = horizon_factor
        self.dummy = dummy
        self.regularize_null = regularize_null

    def fit(self, model: HypothesisModel, y=None, pbars=None):
        if not isinstance(model, HypothesisModel):
            raise ValidationError("CovertSequentialTest needs a hypothesis model")
        if self.regularize_null:
            model = model.regularize_null(self.regularize_null)
        self.model_ = model
        self.policy_ = build_policy(model, self.n, self.eta, self.zeta,
                                    horizon_factor=self.horizon_factor, dummy=self.dummy, pbars=pbars)
        self.alpha_ = np.asarray(self.policy_.alpha)
        self.pbar_ = np.asarray(self.policy_.pbar)
        self.thresholds_ = np.asarray(self.policy_.thresholds)
        return self

    def run_episode(self, truth, rng, record=False) -> EpisodeResult:
        check_is_fitted(self, "policy_")
        return run_episode(self.policy_, truth, rng, record=record)

    def predict(self, traces):
        """``traces``: iterable of (actions, alice_observations) pairs."""
        check_is_fitted(self, "policy_")
        logtab = _log_table(self.model_)
        out = []
        for actions, obs in traces:
            actions = np.asarray(actions, dtype=np.int64)
            obs = np.asarray(obs, dtype=np.int64)
            ll = logtab[:, actions, obs].sum(axis=1) if actions.size else np.zeros(len(self.model_.labels))
            out.append(self.model_.labels[_ml(ll)])
        return np.array(out, dtype=object)
