"""Hypothesis-testing and Gaussian-bandit models, with JSON loading.

Model files are JSON documents of one of two shapes::

    {"hypotheses": ["a", "b"], "actions": 3,
     "alice":  {"a": [[p(y=0), p(y=1)], ...one row per action...], "b": ...},
     "willie": {"a": [[...], ...], "b": ...}}

    {"alice_means": [0, 1, 0.5], "willie_means": [0, 1, 0.5]}

Action 0 is always the null action.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import ModelError, ValidationError
from .prob import SUM_TOL, Categorical, EffectiveActionDist

logger = logging.getLogger(__name__)

BUILTIN_DIR = os.path.join(os.path.dirname(__file__), "data")


def _kl_rows(p: np.ndarray, q: np.ndarray) -> float:
    support = p > 0
    if np.any(q[support] == 0):
        return np.inf
    return max(float(np.sum(p[support] * np.log(p[support] / q[support]))), 0.0)


def project_simplex(y: np.ndarray, total: float = 1.0) -> np.ndarray:
    """Euclidean projection of ``y`` onto ``{x >= 0, sum x = total}`` (sort-based)."""
    y = np.asarray(y, dtype=float)
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - total
    ks = np.arange(1, y.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    return np.maximum(y - css[rho] / (rho + 1.0), 0.0)


def project_floored_simplex(y: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Projection onto the simplex with every coordinate at least ``floor``."""
    k = len(y)
    return floor + project_simplex(np.asarray(y, float) - floor, 1.0 - k * floor)


def null_reachable_residual(effective: np.ndarray, null: np.ndarray, iters: int = 4000) -> float:
    """min over the simplex of ||sum_x p(x) q^x - q^0||^2 (projected gradient)."""
    k = effective.shape[0]
    gram = effective @ effective.T
    lin = effective @ null
    step = 1.0 / max(np.linalg.eigvalsh(gram)[-1], 1e-12)
    p = np.full(k, 1.0 / k)
    for _ in range(iters):
        p_next = project_simplex(p - step * (gram @ p - lin))
        if np.max(np.abs(p_next - p)) < 1e-15:
            p = p_next
            break
        p = p_next
    r = p @ effective - null
    return float(r @ r)


@dataclass(frozen=True, eq=False)
class HypothesisModel:
    """Finite tables of Alice's and Willie's observation laws.

    ``alice[i, x]`` is the law of Alice's observation under hypothesis
    ``labels[i]`` and action ``x``; ``willie`` likewise for the adversary.
    """

    labels: tuple
    alice: np.ndarray
    willie: np.ndarray

    def __post_init__(self):
        alice = np.array(self.alice, dtype=float)
        willie = np.array(self.willie, dtype=float)
        labels = tuple(str(lab) for lab in self.labels)
        if len(set(labels)) != len(labels) or len(labels) < 2:
            raise ModelError("need at least two distinct hypothesis labels")
        if alice.ndim != 3 or willie.ndim != 3:
            raise ModelError("alice and willie must be (hypothesis, action, outcome) tables")
        if alice.shape[:2] != (len(labels), alice.shape[1]) or willie.shape[:2] != alice.shape[:2]:
            raise ModelError(f"table shapes disagree: alice {alice.shape}, willie {willie.shape}")
        if alice.shape[1] < 2:
            raise ModelError("need the null action plus at least one effective action")
        for name, tab in (("alice", alice), ("willie", willie)):
            if np.any(tab < 0) or np.any(np.abs(tab.sum(axis=2) - 1.0) > SUM_TOL):
                raise ModelError(f"{name} rows must be probability vectors")
        alice.setflags(write=False)
        willie.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "alice", alice)
        object.__setattr__(self, "willie", willie)
        self._check_alice()
        self._check_willie()

    @property
    def n_hypotheses(self) -> int:
        return len(self.labels)

    @property
    def n_actions(self) -> int:
        """Number of actions including the null action."""
        return self.alice.shape[1]

    @property
    def n_effective(self) -> int:
        return self.alice.shape[1] - 1

    def index(self, label) -> int:
        try:
            return self.labels.index(str(label))
        except ValueError:
            raise ValidationError(f"unknown hypothesis {label!r}; known: {list(self.labels)}") from None

    def alice_dist(self, theta, x: int) -> Categorical:
        return Categorical(self.alice[self.index(theta), x])

    def willie_dist(self, theta, x: int) -> Categorical:
        return Categorical(self.willie[self.index(theta), x])

    @cached_property
    def divergences(self) -> np.ndarray:
        """``D[i, j, x] = D(alice[i, x] || alice[j, x])`` in nats."""
        h, a = self.n_hypotheses, self.n_actions
        out = np.zeros((h, h, a))
        for i in range(h):
            for j in range(h):
                for x in range(a):
                    out[i, j, x] = _kl_rows(self.alice[i, x], self.alice[j, x])
        out.setflags(write=False)
        return out

    @cached_property
    def log_alice(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            out = np.log(self.alice)
        out.setflags(write=False)
        return out

    def _check_alice(self):
        d = self.divergences
        h = self.n_hypotheses
        off = ~np.eye(h, dtype=bool)
        if np.any(d[:, :, 0][off] > 1e-12):
            raise ModelError("the null action must not distinguish hypotheses")
        eff = d[:, :, 1:][off]
        if not np.all(np.isfinite(eff)):
            raise ModelError("some effective action separates two hypotheses noiselessly "
                             "(infinite divergence); such models are not supported")
        if np.any(eff.max(axis=1) <= 0):
            raise ModelError("some pair of hypotheses is not distinguishable by any action")
        if np.any(eff <= 0):
            logger.info("some effective actions carry no information about some hypothesis pairs")

    def _check_willie(self):
        for i, lab in enumerate(self.labels):
            res = null_reachable_residual(self.willie[i, 1:], self.willie[i, 0])
            if res < 1e-10:
                raise ModelError(f"under {lab!r} a mixture of effective actions reproduces "
                                 "Willie's idle distribution; covert exponents are undefined")

    def null_is_degenerate(self) -> bool:
        """True when some chi-square against Willie's idle law is infinite."""
        for i in range(self.n_hypotheses):
            null = self.willie[i, 0]
            reach = self.willie[i, 1:].max(axis=0)
            if np.any((null == 0) & (reach > 0)):
                return True
        return False

    def regularize_null(self, eps: float) -> "HypothesisModel":
        """Replace each idle law q^0 by ``(1 - eps) q^0 + eps * uniform``."""
        if not 0 < eps < 1:
            raise ValidationError(f"regularization eps must lie in (0, 1), got {eps}")
        willie = np.array(self.willie)
        z = willie.shape[2]
        willie[:, 0] = (1 - eps) * willie[:, 0] + eps / z
        willie[:, 0] /= willie[:, 0].sum(axis=1, keepdims=True)
        return HypothesisModel(self.labels, self.alice, willie)

    def to_json(self) -> dict:
        return {
            "hypotheses": list(self.labels),
            "actions": self.n_actions,
            "alice": {lab: self.alice[i].tolist() for i, lab in enumerate(self.labels)},
            "willie": {lab: self.willie[i].tolist() for i, lab in enumerate(self.labels)},
        }

    @classmethod
    def from_bernoulli(cls, labels, alice_p1, willie_p1) -> "HypothesisModel":
        """Build from tables of P(observation = 1), shape (hypothesis, action)."""
        a = np.asarray(alice_p1, dtype=float)
        w = np.asarray(willie_p1, dtype=float)
        return cls(tuple(labels), np.stack([1 - a, a], axis=-1), np.stack([1 - w, w], axis=-1))


@dataclass(frozen=True, eq=False)
class GaussianBanditModel:
    """Unit-variance Gaussian bandits for Alice and Willie; arm 0 is the null arm."""

    alice_means: np.ndarray
    willie_means: np.ndarray

    def __post_init__(self):
        a = np.array(self.alice_means, dtype=float)
        w = np.array(self.willie_means, dtype=float)
        if a.ndim != 1 or a.shape != w.shape or a.size < 3:
            raise ModelError("need matching mean vectors with a null arm and >= 2 effective arms")
        if a[0] != 0 or w[0] != 0:
            raise ModelError("the null arm must have mean exactly 0 for Alice and Willie")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(w))):
            raise ModelError("means must be finite")
        eff = a[1:]
        if np.sum(eff == eff.max()) > 1:
            raise ModelError("the best effective arm must be unique")
        a.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "alice_means", a)
        object.__setattr__(self, "willie_means", w)

    @property
    def n_effective(self) -> int:
        return self.alice_means.size - 1

    @property
    def best_arm(self) -> int:
        """Best effective arm, labelled 1..K."""
        return int(np.argmax(self.alice_means[1:])) + 1

    def to_json(self) -> dict:
        return {"alice_means": self.alice_means.tolist(), "willie_means": self.willie_means.tolist()}


def model_from_json(doc: dict):
    if not isinstance(doc, dict):
        raise ModelError("model document must be a JSON object")
    if "alice_means" in doc:
        extra = set(doc) - {"alice_means", "willie_means", "name", "description"}
        if extra:
            raise ModelError(f"unknown model keys: {sorted(extra)}")
        return GaussianBanditModel(doc["alice_means"], doc.get("willie_means", []))
    required = {"hypotheses", "alice", "willie"}
    if not required <= set(doc):
        raise ModelError(f"model is missing keys: {sorted(required - set(doc))}")
    extra = set(doc) - required - {"actions", "name", "description"}
    if extra:
        raise ModelError(f"unknown model keys: {sorted(extra)}")
    labels = [str(h) for h in doc["hypotheses"]]
    try:
        alice = [doc["alice"][lab] for lab in labels]
        willie = [doc["willie"][lab] for lab in labels]
    except (KeyError, TypeError) as exc:
        raise ModelError(f"missing table for hypothesis {exc}") from None
    model = HypothesisModel(tuple(labels), alice, willie)
    if "actions" in doc and int(doc["actions"]) != model.n_actions:
        raise ModelError(f"'actions' says {doc['actions']} but tables have {model.n_actions}")
    return model


def load_model(path: str):
    """Load a model file. ``builtin:<name>`` reads a packaged model."""
    if path.startswith("builtin:"):
        path = os.path.join(BUILTIN_DIR, path.split(":", 1)[1] + ".json")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ModelError(f"model file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ModelError(f"model file {path} is not valid JSON: {exc}") from None
    return model_from_json(doc)


def table12_model(regularize: float | None = None) -> HypothesisModel:
    """Three Bernoulli hypotheses, two effective actions; Willie's idle output is always 0."""
    model = HypothesisModel.from_bernoulli(
        ("a", "b", "c"),
        [[0.0, 0.9, 0.6], [0.0, 0.9, 0.9], [0.0, 0.6, 0.9]],
        [[0.0, 0.6, 0.9]] * 3,
    )
    return model.regularize_null(regularize) if regularize else model


def table3_bandit() -> GaussianBanditModel:
    return GaussianBanditModel([0.0, 1.0, 0.5], [0.0, 1.0, 0.5])


def as_effective(p: Sequence[float], floor: float = 0.0) -> EffectiveActionDist:
    p = np.clip(np.asarray(p, float), 0.0, None)
    return EffectiveActionDist(p / p.sum(), floor=min(floor, float(p.min() / p.sum())))
