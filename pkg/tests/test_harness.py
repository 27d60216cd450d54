import csv
import io
import json
import math

import numpy as np
import pytest

from covertsense.errors import InsufficientCells, ValidationError
from covertsense.harness import (
    EPISODE_COLUMNS,
    SCALING_COLUMNS,
    BatchSpec,
    dump_json,
    episodes_csv,
    fit_sqrt_scaling,
    run_batch,
    scaling_csv,
    wilson_ci,
)
from covertsense.models import HypothesisModel


def test_wilson_coverage(rng):
    p, n, trials = 0.1, 200, 1000
    hits = 0
    for _ in range(trials):
        lo, hi = wilson_ci(int(rng.binomial(n, p)), n)
        hits += lo <= p <= hi
    assert hits / trials == pytest.approx(0.95, abs=0.02)
    assert wilson_ci(0, 100)[0] == pytest.approx(0.0, abs=1e-12)


def test_fit_recovers_exact_slope():
    ns = [100, 400, 900, 1600]
    cells = [(n, math.exp(-(0.5 + 2 * math.sqrt(n))), 10**9) for n in ns]
    fit = fit_sqrt_scaling(cells)
    assert fit.slope == pytest.approx(2.0, abs=1e-9)
    assert fit.intercept == pytest.approx(0.5, abs=1e-7)
    assert fit.r2 == pytest.approx(1.0)


def test_fit_interval_coverage(rng):
    xs = np.array([10.0, 20.0, 30.0, 40.0, 50.0])
    hits = 0
    for _ in range(100):
        ys = 0.1 * xs + rng.normal(scale=0.2, size=xs.size)
        fit = fit_sqrt_scaling([(x * x, math.exp(-y), 1000) for x, y in zip(xs, ys)])
        hits += fit.ci[0] <= 0.1 <= fit.ci[1]
    assert hits >= 88


def test_fit_guards():
    with pytest.raises(InsufficientCells):
        fit_sqrt_scaling([(1, 0.1, 100), (4, 0.05, 100)])
    with pytest.raises(ValidationError):
        fit_sqrt_scaling([(1, 0.1, 100), (1, 0.05, 100), (4, 0.01, 100)])
    fit = fit_sqrt_scaling([(1, 0.3, 100), (4, 0.1, 100), (9, 0.0, 100)])
    assert fit.surrogate.tolist() == [False, False, True]
    assert fit.ys[-1] == pytest.approx(-math.log(0.03))


@pytest.fixture(scope="module")
def small():
    return HypothesisModel.from_bernoulli(("lo", "hi"), [[0.5, 0.2], [0.5, 0.8]], [[0.5, 0.7]] * 2)


def test_batch_validation(small):
    with pytest.raises(ValidationError):
        run_batch(BatchSpec("ht", "x", [200], 0.5, episodes=50), model=small)
    with pytest.raises(ValidationError):
        BatchSpec("sideways", "x", [200], 0.5).validate()
    with pytest.raises(ValidationError):
        run_batch(BatchSpec("bai", "x", [0.1], 1.0, episodes=100), model=small)


def test_worker_count_does_not_change_results(small):
    spec = BatchSpec("ht", "builtin:none", [200, 800], 0.5, episodes=120, master_seed=4)
    s1, e1 = run_batch(spec, workers=1, model=small)
    s2, e2 = run_batch(spec, workers=2, model=small)
    assert episodes_csv(spec, e1) == episodes_csv(spec, e2)
    assert dump_json([s.to_json() for s in s1]) == dump_json([s.to_json() for s in s2])
    assert set(s1[0].per_truth) == {"lo", "hi"}
    assert s1[0].per_truth["lo"]["episodes"] == 60


def test_episode_csv_layout(small):
    spec = BatchSpec("ht", "builtin:none", [200], 0.5, episodes=100)
    _, eps = run_batch(spec, model=small)
    rows = list(csv.reader(io.StringIO(episodes_csv(spec, eps))))
    assert tuple(rows[0]) == EPISODE_COLUMNS
    assert len(rows) == 101
    assert [r[2] for r in rows[1:4]] == ["0", "1", "2"]


def test_scaling_csv_layout():
    fit = fit_sqrt_scaling([(1, 0.3, 100), (4, 0.1, 100), (9, 0.02, 100)])
    rows = list(csv.reader(io.StringIO(scaling_csv(fit, [0.3, 0.1, 0.02]))))
    assert tuple(rows[0]) == SCALING_COLUMNS and len(rows) == 4


def test_dump_json_is_stable():
    text = dump_json({"b": float("nan"), "a": np.float64(1.5), "c": np.arange(2), "d": math.inf})
    assert json.loads(text) == {"a": 1.5, "b": None, "c": [0, 1], "d": None}
    assert text.index('"a"') < text.index('"b"')
