"""Seeded Monte Carlo batches, per-cell statistics and square-root scaling fits."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import bai, seqtest
from .errors import InsufficientCells, ValidationError
from .models import GaussianBanditModel, HypothesisModel, load_model
from .prob import derive_stream

logger = logging.getLogger(__name__)

MIN_EPISODES = 100
EPISODE_COLUMNS = ("cell", "grid_value", "episode_id", "truth", "decision", "stop_time",
                   "timeout_flag", "effective_pulls", "kl_bound_contrib",
                   "stat_at_stop", "threshold_at_stop")
SCALING_COLUMNS = ("cell", "x", "y", "error_rate", "surrogate", "fitted_y",
                   "slope", "intercept", "slope_ci_low", "slope_ci_high", "r2")


@dataclass
class BatchSpec:
    mode: str                      # "ht" or "bai"
    model: str                     # path or builtin:<name>
    grid: list                     # n values (ht) or delta values (bai)
    eta: float
    episodes: int = 2000
    master_seed: int = 0
    zeta: float = 0.01             # ht threshold slack
    regularize: float | None = None
    horizon_factor: int = 4
    kappa: float = 0.05
    zeta_floor: float | None = None
    alpha_floor: float = 0.01
    horizon_const: float = 100_000.0
    recompute_period: int = 1
    n_challengers: int | None = None

    def validate(self) -> "BatchSpec":
        if self.mode not in ("ht", "bai"):
            raise ValidationError(f"mode must be 'ht' or 'bai', got {self.mode!r}")
        if not self.grid:
            raise ValidationError("grid must be nonempty")
        if int(self.episodes) < MIN_EPISODES:
            raise ValidationError(f"need at least {MIN_EPISODES} episodes per cell, got {self.episodes}")
        if not self.eta > 0:
            raise ValidationError(f"eta must be positive, got {self.eta}")
        return self

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class CellSummary:
    cell: int
    grid_value: float
    episodes: int
    errors: int
    timeouts: int
    error_rate: float
    error_ci: tuple
    timeout_rate: float
    stop_quantiles: dict
    mean_effective_pulls: float
    covertness: dict
    per_truth: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        out["error_ci"] = list(self.error_ci)
        return out


def wilson_ci(successes: int, trials: int, level: float = 0.95) -> tuple:
    ci = stats.binomtest(int(successes), int(trials)).proportion_ci(confidence_level=level,
                                                                    method="wilson")
    return float(ci.low), float(ci.high)


def _ht_chunk(args):
    policy, labels, seed, cell, start, stop = args
    out = []
    for e in range(start, stop):
        truth = labels[e % len(labels)]
        out.append(seqtest.run_episode(policy, truth, derive_stream(seed, cell, e)))
    return out


def _bai_chunk(args):
    bandit, config, seed, cell, start, stop = args
    designer = bai.ControlDesigner(bandit.willie_means[1:], config.floor(bandit.n_effective))
    out = []
    for e in range(start, stop):
        out.append(bai.run_episode(bandit, config, derive_stream(seed, cell, e), designer=designer))
    return out


def _chunks(n: int, workers: int):
    size = max(1, math.ceil(n / (4 * workers))) if workers > 1 else n
    return [(s, min(s + size, n)) for s in range(0, n, size)]


def _run_parallel(fn, payload, n: int, workers: int):
    jobs = [(*payload, s, e) for s, e in _chunks(n, workers)]
    if workers <= 1:
        parts = [fn(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(fn, jobs))  # map keeps submission order
    return [r for part in parts for r in part]


def _quantiles(times) -> dict:
    if not times:
        return {q: None for q in ("q50", "q90", "q95", "max")}
    arr = np.asarray(times, dtype=float)
    return {"q50": float(np.quantile(arr, 0.5)), "q90": float(np.quantile(arr, 0.9)),
            "q95": float(np.quantile(arr, 0.95)), "max": float(arr.max())}


def summarize_cell(cell: int, value, results, extra=None) -> CellSummary:
    n = len(results)
    wrong = [not r.correct for r in results]   # timeouts count as errors
    errors = int(sum(wrong))
    timeouts = int(sum(r.timeout for r in results))
    kls = np.array([r.kl_bound for r in results])
    per_truth = {}
    for lab in sorted({r.truth for r in results}):
        sub = [w for r, w in zip(results, wrong) if r.truth == lab]
        per_truth[lab] = {"episodes": len(sub), "errors": int(sum(sub)),
                          "error_rate": float(np.mean(sub))}
    return CellSummary(
        cell=cell, grid_value=value, episodes=n, errors=errors, timeouts=timeouts,
        error_rate=errors / n, error_ci=wilson_ci(errors, n), timeout_rate=timeouts / n,
        stop_quantiles=_quantiles([r.stop_time for r in results if not r.timeout]),
        mean_effective_pulls=float(np.mean([r.effective_pulls for r in results])),
        covertness={"mean": float(kls.mean()), "max": float(kls.max()),
                    "q95": float(np.quantile(kls, 0.95))},
        per_truth=per_truth, extra=extra or {},
    )


def run_batch(spec: BatchSpec, workers: int = 1, model=None):
    """Run every cell of ``spec``; returns (cell summaries, per-cell episode lists).

    Episode ``e`` of cell ``c`` draws from the stream keyed on
    ``(master_seed, c, e)``, so the worker count never changes a result.
    """
    spec.validate()
    model = load_model(spec.model) if model is None else model
    summaries, episodes = [], []
    for c, value in enumerate(spec.grid):
        if spec.mode == "ht":
            if not isinstance(model, HypothesisModel):
                raise ValidationError("ht batches need a hypothesis model")
            m = model.regularize_null(spec.regularize) if spec.regularize else model
            policy = seqtest.build_policy(m, int(value), spec.eta, spec.zeta,
                                          horizon_factor=spec.horizon_factor)
            res = _run_parallel(_ht_chunk, (policy, m.labels, spec.master_seed, c),
                                int(spec.episodes), workers)
            extra = {"policy": policy.to_json(),
                     "leading_covertness_max": float(policy.leading_covertness.max())}
        else:
            if not isinstance(model, GaussianBanditModel):
                raise ValidationError("bai batches need a Gaussian bandit model")
            config = bai.BaiPolicyConfig(float(value), spec.eta, spec.zeta_floor, spec.kappa,
                                         spec.recompute_period, spec.horizon_const,
                                         spec.n_challengers, spec.alpha_floor).validate(model.n_effective)
            res = _run_parallel(_bai_chunk, (model, config, spec.master_seed, c),
                                int(spec.episodes), workers)
            stopped = [r for r in res if not r.timeout]
            try:
                tau_sup = bai.tau_sup_estimate([r.stop_time for r in res], spec.kappa)
            except ValidationError:
                tau_sup = None
            horizon = math.inf if tau_sup is None else tau_sup
            untruncated = float(np.mean([r.kl_bound for r in res]))
            for r in res:
                # covertness is accounted up to the tau_sup estimate; later steps are dropped
                r.kl_bound = bai.kl_until(r, horizon)
                r.extra.pop("kl_profile", None)
            extra = {
                "tau_sup": None if tau_sup is None or math.isinf(tau_sup) else tau_sup,
                "covertness_mean_to_stop": untruncated,
                "kappa": spec.kappa,
                "horizon_cap": config.horizon_cap(),
                "all_stops_exceed_threshold": all(r.extra["R"] > r.extra["Gamma"] for r in stopped),
                "threshold_offset": bai.f_inverse(config.delta, config.k(model.n_effective)),
            }
        summaries.append(summarize_cell(c, value, res, extra))
        episodes.append(res)
        logger.info("cell %d (%s): error %.4f, timeouts %.4f", c, value,
                    summaries[-1].error_rate, summaries[-1].timeout_rate)
    return summaries, episodes


@dataclass
class ScalingFit:
    xs: np.ndarray
    ys: np.ndarray
    slope: float
    intercept: float
    r2: float
    ci: tuple
    surrogate: np.ndarray

    def fitted(self) -> np.ndarray:
        return self.intercept + self.slope * self.xs

    def to_json(self) -> dict:
        return {"xs": self.xs.tolist(), "ys": self.ys.tolist(), "slope": self.slope,
                "intercept": self.intercept, "r2": self.r2, "ci": list(self.ci),
                "surrogate": self.surrogate.tolist()}


def fit_sqrt_scaling(cells, level: float = 0.95, transform=np.sqrt) -> ScalingFit:
    """Affine least-squares fit of -log(error rate) against ``transform(grid value)``.

    ``cells`` holds ``(grid value, error rate, episodes)`` triples. Zero-error
    cells are replaced by the rule-of-three bound 3/N and flagged.
    """
    cells = sorted(cells, key=lambda c: c[0])
    if len(cells) < 3:
        raise InsufficientCells(f"need at least 3 cells, got {len(cells)}")
    xs = transform(np.asarray([c[0] for c in cells], dtype=float))
    if np.any(np.diff(xs) <= 0):
        raise ValidationError("grid values must be distinct")
    rates = np.asarray([c[1] for c in cells], dtype=float)
    n = np.asarray([c[2] for c in cells], dtype=float)
    surrogate = rates <= 0
    rates = np.where(surrogate, 3.0 / n, rates)
    if np.any(rates >= 1):
        raise ValidationError("error rate 1 leaves -log(P) at 0 or below; cannot fit")
    ys = -np.log(rates)
    fit = stats.linregress(xs, ys)
    t = stats.t.ppf(0.5 + level / 2, len(xs) - 2)
    half = t * fit.stderr
    return ScalingFit(xs, ys, float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2),
                      (float(fit.slope - half), float(fit.slope + half)), surrogate)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def episodes_csv(spec: BatchSpec, episodes) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPISODE_COLUMNS)
    for c, res in enumerate(episodes):
        for e, r in enumerate(res):
            w.writerow([_fmt(v) for v in (
                c, spec.grid[c], e, r.truth, r.decision, r.stop_time, r.timeout,
                r.effective_pulls, float(r.kl_bound), r.extra.get("R"), r.extra.get("Gamma"))])
    return buf.getvalue()


def scaling_csv(fit: ScalingFit, rates) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCALING_COLUMNS)
    for i, (x, y) in enumerate(zip(fit.xs, fit.ys)):
        w.writerow([_fmt(v) for v in (i, float(x), float(y), float(rates[i]), bool(fit.surrogate[i]),
                                      float(fit.fitted()[i]), fit.slope, fit.intercept,
                                      fit.ci[0], fit.ci[1], fit.r2)])
    return buf.getvalue()


def dump_json(obj) -> str:
    """Stable JSON text: sorted keys, fixed indentation, NaN/inf mapped to null."""
    def clean(o):
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, np.ndarray):
            return clean(o.tolist())
        if isinstance(o, (np.floating, float)):
            o = float(o)
            return o if math.isfinite(o) else None
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.bool_):
            return bool(o)
        return o
    return json.dumps(clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"
