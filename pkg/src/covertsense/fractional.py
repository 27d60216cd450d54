"""Concave-over-convex ratio maximization on the (floored) probability simplex.

Two routes to the same optimum:

* :func:`dinkelbach` -- parametric iteration ``lam <- f(p)/g(p)`` with a
  projected subgradient ascent on ``f - lam * g`` for the inner problem;
* :func:`grid_maximize` -- brute-force evaluation on a regular simplex grid,
  kept independent of the iterative path and used as its oracle.

A program supplies vectorized ``numerator``/``denominator`` (arrays of shape
``(..., K)``) plus single-point ``numerator_supergradient`` and
``denominator_gradient``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDenominator, SolverDiverged
from .models import project_floored_simplex

DEN_EPS = 1e-14


class FractionalProgram:
    """Interface: maximize numerator(p) / denominator(p) over the simplex."""

    size: int

    def numerator(self, p):
        raise NotImplementedError

    def denominator(self, p):
        return np.ones(np.shape(p)[:-1])

    def numerator_supergradient(self, p):
        raise NotImplementedError

    def denominator_gradient(self, p):
        return np.zeros(self.size)

    def ratio(self, p):
        den = self.denominator(p)
        if np.any(den < DEN_EPS):
            raise DegenerateDenominator(f"denominator {den} vanishes at {np.asarray(p).tolist()}")
        return self.numerator(p) / den


class MinLinearOverChi(FractionalProgram):
    """min_j (D[j] . p) / sqrt(chi2(p @ W || null)) for categorical outputs.

    With ``willie=None`` the denominator is 1 (the non-covert program).
    """

    def __init__(self, div: np.ndarray, willie: np.ndarray | None = None, null: np.ndarray | None = None):
        self.div = np.atleast_2d(np.asarray(div, dtype=float))
        self.size = self.div.shape[1]
        self.covert = willie is not None
        if self.covert:
            self.willie = np.asarray(willie, dtype=float)
            self.null = np.asarray(null, dtype=float)
            live = self.null > 0
            if np.any(~live & (self.willie.max(axis=0) > 0)):
                from .errors import AbsoluteContinuityViolation
                raise AbsoluteContinuityViolation(
                    "Willie's idle law misses outcomes that effective actions produce; "
                    "the chi-square denominator is infinite (regularize the idle law)")
            self._inv_null = np.where(live, 1.0 / np.where(live, self.null, 1.0), 0.0)

    def numerator(self, p):
        return np.min(np.asarray(p) @ self.div.T, axis=-1)

    def binding(self, p) -> int:
        vals = self.div @ np.asarray(p)
        return int(np.flatnonzero(vals <= vals.min() + 1e-12)[0])

    def numerator_supergradient(self, p):
        return self.div[self.binding(p)]

    def chi2(self, p):
        if not self.covert:
            return np.zeros(np.shape(p)[:-1])
        diff = np.asarray(p) @ self.willie - self.null
        return np.sum(diff * diff * self._inv_null, axis=-1)

    def denominator(self, p):
        if not self.covert:
            return np.ones(np.shape(p)[:-1])
        return np.sqrt(self.chi2(p))

    def denominator_gradient(self, p):
        if not self.covert:
            return np.zeros(self.size)
        diff = np.asarray(p) @ self.willie - self.null
        g = math.sqrt(float(np.sum(diff * diff * self._inv_null)))
        if g < DEN_EPS:
            return np.zeros(self.size)
        return self.willie @ (diff * self._inv_null) / g


class GaussianAltOverChi(FractionalProgram):
    """Closed-form alternative-bandit infimum over sqrt(exp(mean^2) - 1).

    ``gaps2[x] = (mu_best - mu_x)^2`` for every effective arm (0 for the
    best arm itself, which is excluded from the minimum).
    """

    def __init__(self, gaps2: np.ndarray, best: int, willie_means: np.ndarray | None = None):
        self.gaps2 = np.asarray(gaps2, dtype=float)
        self.size = self.gaps2.size
        self.best = int(best)
        self.challengers = np.array([x for x in range(self.size) if x != self.best])
        self.covert = willie_means is not None
        if self.covert:
            self.wm = np.asarray(willie_means, dtype=float)

    def _pairs(self, p):
        p = np.asarray(p, dtype=float)
        pb = p[..., self.best][..., None]
        px = p[..., self.challengers]
        tot = pb + px
        safe = np.where(tot > 0, tot, 1.0)
        return 0.5 * self.gaps2[self.challengers] * np.where(tot > 0, pb * px / safe, 0.0)

    def numerator(self, p):
        return np.min(self._pairs(p), axis=-1)

    def binding(self, p) -> int:
        vals = self._pairs(p)
        return int(self.challengers[np.flatnonzero(vals <= vals.min() + 1e-15)[0]])

    def numerator_supergradient(self, p):
        p = np.asarray(p, dtype=float)
        x = self.binding(p)
        b = self.best
        tot = p[b] + p[x]
        grad = np.zeros(self.size)
        c = 0.5 * self.gaps2[x]
        if tot <= 0:
            grad[b] = grad[x] = 0.25 * c
        else:
            grad[b] = c * (p[x] / tot) ** 2
            grad[x] = c * (p[b] / tot) ** 2
        return grad

    def chi2(self, p):
        if not self.covert:
            return np.zeros(np.shape(p)[:-1])
        m = np.asarray(p) @ self.wm
        return np.expm1(m * m)

    def denominator(self, p):
        if not self.covert:
            return np.ones(np.shape(p)[:-1])
        return np.sqrt(self.chi2(p))

    def denominator_gradient(self, p):
        if not self.covert:
            return np.zeros(self.size)
        m = float(np.asarray(p) @ self.wm)
        g = math.sqrt(math.expm1(m * m))
        if g < DEN_EPS:
            return np.zeros(self.size)
        return self.wm * (m * math.exp(m * m) / g)


@dataclass
class RatioOptimum:
    pbar: np.ndarray
    value: float
    trace: list = field(default_factory=list)


def _start_point(prog: FractionalProgram, floor: float) -> np.ndarray:
    k = prog.size
    cands = [np.full(k, 1.0 / k)]
    for x in range(k):
        e = np.full(k, floor)
        e[x] = 1.0 - (k - 1) * floor
        cands.append(e)
    for c in cands:
        if float(prog.denominator(c)) >= DEN_EPS:
            return c
    raise DegenerateDenominator("denominator vanishes at every starting point")


def _inner_ascent(prog, lam, p0, floor, steps):
    """Normalized projected supergradient ascent on f - lam g, best iterate kept."""
    p = p0.copy()
    best_p = p0.copy()
    best_val = float(prog.numerator(p0)) - lam * float(prog.denominator(p0))
    base = best_val
    for t in range(1, steps + 1):
        direction = prog.numerator_supergradient(p) - lam * prog.denominator_gradient(p)
        direction = direction - direction.mean()  # tangent to the simplex
        norm = math.sqrt(float(direction @ direction))
        if norm < 1e-15:
            break
        p = project_floored_simplex(p + direction / (norm * math.sqrt(t)), floor)
        val = float(prog.numerator(p)) - lam * float(prog.denominator(p))
        if val > best_val:
            best_val, best_p = val, p
    return best_p, best_val - base


def dinkelbach(prog: FractionalProgram, floor: float = 0.0, max_outer: int = 200,
               inner_steps: int = 5000, tol: float = 1e-10) -> RatioOptimum:
    """Maximize ``prog.ratio`` over the simplex with entries >= ``floor``."""
    p = _start_point(prog, floor)
    lam = float(prog.ratio(p))
    trace = [{"iter": 0, "lambda": lam, "pbar": p.tolist()}]
    for k in range(1, max_outer + 1):
        cand, gain = _inner_ascent(prog, lam, p, floor, inner_steps)
        if gain <= tol:
            trace.append({"iter": k, "lambda": lam, "gain": gain, "converged": True})
            return RatioOptimum(p, lam, trace)
        if float(prog.denominator(cand)) < DEN_EPS:
            raise DegenerateDenominator("iterate reached a vanishing denominator")
        new_lam = float(prog.ratio(cand))
        trace.append({"iter": k, "lambda": new_lam, "gain": gain, "pbar": cand.tolist()})
        p = cand
        if new_lam - lam <= 1e-13 * max(1.0, abs(lam)):
            lam = new_lam
            trace[-1]["converged"] = True
            return RatioOptimum(p, lam, trace)
        lam = new_lam
    raise SolverDiverged(f"Dinkelbach did not converge in {max_outer} iterations (lambda={lam})")


def simplex_grid(k: int, resolution: float, floor: float = 0.0) -> np.ndarray:
    """All points of the simplex with coordinates on a ``resolution`` lattice."""
    steps = int(round(1.0 / resolution))
    if k == 1:
        pts = np.ones((1, 1))
    else:
        # stars and bars over `steps` units in k bins
        from itertools import combinations

        bars = np.array(list(combinations(range(steps + k - 1), k - 1)), dtype=np.int64)
        edges = np.concatenate([np.full((len(bars), 1), -1), bars,
                                np.full((len(bars), 1), steps + k - 1)], axis=1)
        pts = (np.diff(edges, axis=1) - 1) / steps
    if floor > 0:
        pts = pts[np.all(pts >= floor - 1e-12, axis=1)]
    return pts


def grid_resolution(k: int) -> float:
    return 1e-3 if k <= 3 else 1e-2


def grid_maximize(prog: FractionalProgram, floor: float = 0.0, resolution: float | None = None,
                  chunk: int = 200_000) -> RatioOptimum:
    """Brute-force maximum of the ratio over a simplex grid."""
    res = grid_resolution(prog.size) if resolution is None else resolution
    pts = simplex_grid(prog.size, res, floor)
    best_val, best_p = -np.inf, None
    for start in range(0, len(pts), chunk):
        block = pts[start:start + chunk]
        den = prog.denominator(block)
        num = prog.numerator(block)
        ok = den >= DEN_EPS
        if not np.any(ok):
            continue
        vals = np.where(ok, num / np.where(ok, den, 1.0), -np.inf)
        i = int(np.argmax(vals))
        if vals[i] > best_val + 1e-15:
            best_val, best_p = float(vals[i]), block[i]
    if best_p is None:
        raise DegenerateDenominator("denominator vanishes on the whole grid")
    return RatioOptimum(best_p.copy(), best_val, [{"grid_resolution": res, "points": len(pts)}])
