"""Willie's side: covertness accounting and an empirical likelihood-ratio detector."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import TooFewTraces, ValidationError
from .prob import ActionDist, Categorical, kl_categorical, kl_gaussian_mixture
from .seqtest import SeqTestPolicy, run_episode, willie_observations

MIN_TRACES = 500
Z95 = 1.959963984540054


def per_step_divergence(control: ActionDist, channels) -> float:
    """D(Willie's output under one step of ``control`` || his idle output).

    ``channels`` is either a (K+1, Z) table of categorical laws, row 0 idle,
    or a length K+1 vector of unit-Gaussian means with mean 0 for the null arm.
    """
    ch = np.asarray(channels, dtype=float)
    if control.alpha == 0:
        return 0.0
    if ch.ndim == 1:
        if ch[0] != 0:
            raise ValidationError("the null arm must have mean 0")
        return kl_gaussian_mixture(control.alpha, control.effective.probs, ch[1:])
    if ch.shape[0] != control.effective.size + 1:
        raise ValidationError(f"{ch.shape[0]} channels for {control.effective.size + 1} actions")
    mix = control.full() @ ch
    return kl_categorical(Categorical(mix / mix.sum()), Categorical(ch[0]))


@dataclass
class CovertnessReport:
    analytic_bound: float
    eta: float
    step_count: int
    empirical_estimate: float | None = None
    per_step_series: np.ndarray | None = None
    slack: float = 0.0
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if self.analytic_bound < 0:
            raise ValidationError("accumulated divergence cannot be negative")
        if self.eta > 1:
            self.notes.append("eta > 1: the 1 - sqrt(eta) detection bound is vacuous")

    @property
    def within_budget(self) -> bool:
        return self.analytic_bound <= self.eta * (1 + self.slack)

    def to_json(self) -> dict:
        return {
            "analytic_bound": self.analytic_bound,
            "empirical_estimate": self.empirical_estimate,
            "eta": self.eta,
            "step_count": self.step_count,
            "within_budget": self.within_budget,
            "slack": self.slack,
            "notes": list(self.notes),
        }


def audit_episode(controls: Sequence, channels, eta: float, step_count: int | None = None,
                  slack: float = 0.0, keep_series: bool = False) -> CovertnessReport:
    """Accumulate per-step divergences along a trace of controls.

    ``controls`` holds either :class:`ActionDist` items (one per step) or
    ``(ActionDist, repeat)`` pairs. Accumulation stops after ``step_count``
    steps; a shorter trace is padded with idle steps, which contribute 0.
    """
    segs = [(c, 1) if isinstance(c, ActionDist) else (c[0], int(c[1])) for c in controls]
    total_len = sum(r for _, r in segs)
    horizon = total_len if step_count is None else int(step_count)
    cache: dict = {}
    total, t = 0.0, 0
    series = [] if keep_series else None
    for ctrl, rep in segs:
        if t >= horizon:
            break
        rep = min(rep, horizon - t)
        key = (ctrl.alpha, ctrl.effective.probs.tobytes())
        if key not in cache:
            cache[key] = per_step_divergence(ctrl, channels)
        d = cache[key]
        if keep_series:
            series.extend(total + d * np.arange(1, rep + 1))
        total += d * rep
        t += rep
    if keep_series and t < horizon:
        series.extend([total] * (horizon - t))
    return CovertnessReport(total, float(eta), horizon, None,
                            None if series is None else np.asarray(series), slack)


def plugin_kl(traces: np.ndarray, idle: np.ndarray, k: int) -> float:
    """Histogram estimate of D(P_{Z^k} || idle^k) from observed traces (k <= 3)."""
    if k > 3:
        raise ValidationError("plug-in estimate is limited to k <= 3")
    traces = np.asarray(traces)[:, :k]
    q = np.asarray(idle, dtype=float)
    counts = Counter(map(tuple, traces.tolist()))
    n = traces.shape[0]
    total = 0.0
    for word, c in counts.items():
        p = c / n
        total += p * math.log(p / float(np.prod(q[list(word)])))
    return max(total, 0.0)


@dataclass
class DetectorResult:
    k: int
    alpha: float
    beta: float
    ci_halfwidth: float
    sum_lower_bound: float
    n_active: int
    n_idle: int
    approximation: str = "mean-field product of the expected per-step output law"

    @property
    def total(self) -> float:
        return self.alpha + self.beta

    def to_json(self) -> dict:
        return {"k": self.k, "alpha": self.alpha, "beta": self.beta, "alpha_plus_beta": self.total,
                "ci_halfwidth": self.ci_halfwidth, "sum_lower_bound": self.sum_lower_bound,
                "n_active": self.n_active, "n_idle": self.n_idle,
                "approximation": self.approximation}


def mean_field_law(policy: SeqTestPolicy, truth) -> np.ndarray:
    """Willie's expected one-step output law while the agent acts on ``truth``."""
    ti = policy.model.index(truth)
    return policy.control(ti).full() @ policy.model.willie[ti]


def detect(active: np.ndarray, idle: np.ndarray, active_law, idle_law, k: int,
           eta: float | None = None) -> DetectorResult:
    """Likelihood-ratio test of "active" against "idle" on the first ``k`` outputs.

    Both hypotheses are i.i.d. products of one-step laws over a finite
    alphabet. The test declares "active" when the ratio exceeds 1.
    ``alpha`` is the miss rate, ``beta`` the false-alarm rate.
    """
    active, idle = np.asarray(active), np.asarray(idle)
    if active.shape[0] < MIN_TRACES or idle.shape[0] < MIN_TRACES:
        raise TooFewTraces(f"need >= {MIN_TRACES} traces per class, got "
                           f"{active.shape[0]} active and {idle.shape[0]} idle")
    if active.shape[1] < k or idle.shape[1] < k:
        raise ValidationError(f"traces are shorter than k={k}")
    with np.errstate(divide="ignore"):
        llr = np.log(np.asarray(active_law, float)) - np.log(np.asarray(idle_law, float))
    llr = np.nan_to_num(llr, nan=0.0, posinf=1e300, neginf=-1e300)

    def declares_active(traces):
        return llr[traces[:, :k]].sum(axis=1) > 0

    a = 1.0 - float(np.mean(declares_active(active)))
    b = float(np.mean(declares_active(idle)))
    hw = Z95 * math.sqrt(a * (1 - a) / active.shape[0] + b * (1 - b) / idle.shape[0])
    bound = 1.0 - math.sqrt(eta) if eta is not None else float("nan")
    return DetectorResult(int(k), a, b, hw, bound, active.shape[0], idle.shape[0])


def simulate_traces(policy: SeqTestPolicy, truth, n_traces: int, k: int, seed: int,
                    stream_key: int = 0):
    """Active and idle Willie traces of length ``k`` for one truth hypothesis.

    Active traces come from real episodes of ``policy`` (idle after stopping).
    """
    from .prob import derive_stream

    ti = policy.model.index(truth)
    q0 = policy.model.willie[ti, 0]
    active = np.empty((n_traces, k), dtype=np.int64)
    for e in range(n_traces):
        rng = derive_stream(seed, stream_key, ti, e)
        ep = run_episode(policy, truth, rng, record=True, horizon_cap=max(k, policy.horizon_cap))
        active[e] = willie_observations(policy, truth, ep.action_trace, k, rng)
    rng = derive_stream(seed, stream_key, ti, n_traces + 1)
    idle = rng.choice(q0.size, size=(n_traces, k), p=q0)
    return active, idle


def bh_bound_check(sample_a: np.ndarray, sample_b: np.ndarray, event, divergence: float) -> float:
    """Empirical P_A(E^c) + P_B(E) minus exp(-D(P_A || P_B)) / 2; nonnegative in expectation."""
    ea = np.asarray([bool(event(s)) for s in sample_a])
    eb = np.asarray([bool(event(s)) for s in sample_b])
    return float(np.mean(~ea) + np.mean(eb)) - 0.5 * math.exp(-divergence)
