"""Acceptance criteria, one PASS/FAIL line each.

Run under pytest (lines appear in the "acceptance criteria" summary section)
or directly with ``python tests/test_acceptance.py``.
"""
import filecmp
import math
import os
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))
from conftest import ACCEPTANCE_LINES, random_model  # noqa: E402

from covertsense import bai  # noqa: E402
from covertsense.cli import detector_audit, main  # noqa: E402
from covertsense.exponents import (  # noqa: E402
    PUBLISHED_COVERT_BAI_ARGMAX,
    PUBLISHED_COVERT_HT_ARGMAX,
    bai_program,
    covert_bai_exponent,
    covert_ht_exponent,
    ht_program,
    noncovert_bai_exponent,
    noncovert_ht_exponent,
)
from covertsense.fractional import dinkelbach, grid_maximize  # noqa: E402
from covertsense.harness import BatchSpec, fit_sqrt_scaling, run_batch  # noqa: E402
from covertsense.models import table12_model, table3_bandit  # noqa: E402
from covertsense.prob import (  # noqa: E402
    Categorical,
    chi2_categorical,
    chi2_gaussian_mixture,
    chi2_gaussian_quadrature,
    kl_categorical,
    tv_categorical,
)

EPS = 0.01            # regularization of Willie's idle law for the testing example
P1_GRID = [2500, 10_000, 40_000]
P2_GRID = [0.1, 0.01]
EPISODES = 2000


def report(n, ok, detail, elapsed, budget):
    ok = ok and elapsed <= budget
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail} [{elapsed:.1f}s / {budget:.0f}s]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def test_criterion_1_divergences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_pinsker, identity_err = -np.inf, 0.0
    for _ in range(10_000):
        m = int(rng.integers(2, 7))
        p = Categorical.normalize(rng.dirichlet(np.ones(m)) + 1e-9)
        q = Categorical.normalize(rng.dirichlet(np.ones(m)) + 1e-9)
        kl, tv, chi = kl_categorical(p, q), tv_categorical(p, q), chi2_categorical(p, q)
        identity_err = max(
            identity_err,
            abs(kl - float(np.sum(p.probs * np.log(p.probs / q.probs)))),
            abs(tv - 0.5 * float(np.abs(p.probs - q.probs).sum())),
            abs(chi - (float(np.sum(p.probs ** 2 / q.probs)) - 1.0)) / max(1.0, chi),
            kl_categorical(p, p),
            max(0.0, kl - math.log1p(chi)),
        )
        worst_pinsker = max(worst_pinsker, tv - math.sqrt(kl / 2))
    gauss_rel = max(abs(chi2_gaussian_mixture([1.0], [mu]) / chi2_gaussian_quadrature(mu) - 1)
                    for mu in np.linspace(0.05, 2.5, 25))
    ok = identity_err < 1e-9 and worst_pinsker <= 1e-12 and gauss_rel <= 1e-6
    assert report(1, ok, f"identity err {identity_err:.2e}, max TV - sqrt(KL/2) {worst_pinsker:.2e} "
                  f"over 1e4 pairs, Gaussian chi2 rel err {gauss_rel:.2e}",
                  time.perf_counter() - t0, 10)


def test_criterion_2_dinkelbach_vs_grid():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    progs = []
    for i in range(25):
        m = random_model(rng, 1 + i % 3)
        progs += [(f"random {i} {lab}", ht_program(m, lab)) for lab in m.labels]
    t12 = table12_model(EPS)
    progs += [(f"testing example {lab}", ht_program(t12, lab)) for lab in t12.labels]
    b = table3_bandit()
    progs.append(("bandit example", bai_program(b.alice_means[1:], b.willie_means[1:])))
    worst, worst_name = 0.0, None
    for name, prog in progs:
        d, g = dinkelbach(prog).value, grid_maximize(prog).value
        gap = abs(d - g) / max(1.0, abs(g))
        if gap > worst:
            worst, worst_name = gap, name
    assert report(2, worst <= 1e-3, f"{len(progs)} programs, worst scaled gap {worst:.2e} ({worst_name})",
                  time.perf_counter() - t0, 120)


def test_criterion_3_published_values():
    t0 = time.perf_counter()
    plain = noncovert_bai_exponent(table3_bandit())
    ht = noncovert_ht_exponent(table12_model(), "min-outside")
    ok = (abs(plain.value - 0.03125) <= 1e-9
          and np.allclose(plain.argmax_pbar.probs, [0.5, 0.5], atol=1e-3)
          and ht.binding_hypothesis == "b"
          and np.allclose(ht.argmax_pbar.probs, [0.5, 0.5], atol=1e-3))
    cov_ht = covert_ht_exponent(table12_model(EPS), 0.5).argmax_pbar.probs
    cov_bai = covert_bai_exponent(table3_bandit(), 1.0).argmax_pbar.probs
    side = (f"covert testing argmax {np.round(cov_ht, 3).tolist()} vs published "
            f"{list(PUBLISHED_COVERT_HT_ARGMAX)}, covert bandit argmax {np.round(cov_bai, 3).tolist()} "
            f"vs published {list(PUBLISHED_COVERT_BAI_ARGMAX)} (not gated)")
    assert report(3, ok, f"bandit value {plain.value:.6g} at {np.round(plain.argmax_pbar.probs, 4).tolist()}, "
                  f"testing argmax {np.round(ht.argmax_pbar.probs, 4).tolist()} at theta={ht.binding_hypothesis}; "
                  + side, time.perf_counter() - t0, 60)


def test_criterion_4_sequential_test_simulation():
    t0 = time.perf_counter()
    spec = BatchSpec("ht", "builtin:table12", P1_GRID, 0.5, episodes=EPISODES, zeta=0.01, regularize=EPS)
    cells, _ = run_batch(spec)
    rates = [c.error_rate for c in cells]
    timeouts = max(c.timeout_rate for c in cells)
    fit = fit_sqrt_scaling([(c.grid_value, c.error_rate, c.episodes) for c in cells])
    lead = max(c.extra["leading_covertness_max"] for c in cells)
    decreasing = all(b < a for a, b in zip(rates, rates[1:]))
    ok = timeouts <= 0.1 and decreasing and fit.ci[0] > 0 and lead <= 0.5 + 1e-9
    assert report(4, ok, f"error {np.round(rates, 4).tolist()}, max timeout {timeouts:.4f}, "
                  f"slope {fit.slope:.4g} CI [{fit.ci[0]:.4g}, {fit.ci[1]:.4g}], "
                  f"leading covertness {lead:.6g}", time.perf_counter() - t0, 600)


@pytest.fixture(scope="module")
def p2():
    t0 = time.perf_counter()
    spec = BatchSpec("bai", "builtin:table3", P2_GRID, 1.0, episodes=EPISODES)
    cells, eps = run_batch(spec)
    return cells, eps, time.perf_counter() - t0


def test_criterion_5_error_and_stopping_rule(p2):
    cells, eps, elapsed = p2
    parts, ok = [], True
    for c, res in zip(cells, eps):
        se = math.sqrt(c.grid_value * (1 - c.grid_value) / c.episodes)
        ok &= c.error_rate <= c.grid_value + 2 * se
        ok &= all(r.extra["R"] > r.extra["Gamma"] for r in res if not r.timeout)
        parts.append(f"delta {c.grid_value}: error {c.error_rate:.4f} (limit {c.grid_value + 2 * se:.4f}), "
                     f"timeouts {c.timeout_rate:.4f}")
    assert report("5a", ok, "; ".join(parts) + "; R > Gamma at every stop", elapsed, 600)


def test_criterion_5_stop_time_ratio(p2):
    cells, _, elapsed = p2
    taus = [c.extra["tau_sup"] for c in cells]
    ratio = taus[1] / taus[0] if None not in taus else math.inf
    kl = [round(c.covertness["mean"], 3) for c in cells]
    assert report("5b", 2.5 <= ratio <= 6, f"tau_sup(0.05) {taus}, ratio {ratio:.3f} (band [2.5, 6]); "
                  f"mean divergence to tau_sup {kl} (eta 1, reported only)", elapsed, 600)


def test_criterion_6_detector_audit():
    t0 = time.perf_counter()
    m = table12_model(EPS)
    worst, ctrl_ok, parts = np.inf, True, []
    for n in P1_GRID:
        out = detector_audit(m, n, 0.25, 0.01, [10, 100, 1000, 10_000], 1000, seed=6)
        for truth, block in out["by_truth"].items():
            for row in block["detector"]:
                worst = min(worst, row["alpha_plus_beta"] + row["ci_halfwidth"])
            c = block["identical_law_control"]
            ctrl_ok &= abs(c["alpha_plus_beta"] - 1) <= 3 * c["ci_halfwidth"]
            parts.append(c["alpha_plus_beta"])
    ok = worst >= 0.4 and ctrl_ok
    assert report(6, ok, f"min CI-adjusted alpha+beta {worst:.4f} (limit 0.4), identical-law controls "
                  f"in [{min(parts):.3f}, {max(parts):.3f}]", time.perf_counter() - t0, 300)


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(
        _same_tree(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


def test_criterion_7_determinism(tmp_path, capsys):
    t0 = time.perf_counter()
    args = ["repro", "--seed", "11", "--episodes", "100", "--traces", "500"]
    codes = [main(args + ["--out", str(tmp_path / "r1")]),
             main(args + ["--out", str(tmp_path / "r2")]),
             main(["--threads", "2"] + args + ["--out", str(tmp_path / "r3")])]
    capsys.readouterr()
    files = sorted(os.path.relpath(os.path.join(d, f), tmp_path / "r1")
                   for d, _, fs in os.walk(tmp_path / "r1") for f in fs)
    ok = codes == [0, 0, 0] and _same_tree(tmp_path / "r1", tmp_path / "r2") \
        and _same_tree(tmp_path / "r1", tmp_path / "r3")
    assert report(7, ok, f"{len(files)} files byte-identical across runs and thread counts",
                  time.perf_counter() - t0, 600)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
