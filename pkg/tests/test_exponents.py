"""Exponent solvers against the brute-force simplex grid.

Frozen values below were produced by ``grid_maximize`` (resolution 1e-3),
which shares no code with the Dinkelbach solver.
"""
import math

import numpy as np
import pytest

from conftest import random_model
from covertsense.errors import DegenerateDenominator, ValidationError
from covertsense.exponents import (
    CovertExponent,
    alt_inf_gaussian,
    bai_program,
    covert_bai_exponent,
    covert_bai_objective,
    covert_ht_exponent,
    covert_ht_objective,
    ht_program,
    noncovert_bai_exponent,
    noncovert_ht_exponent,
)
from covertsense.fractional import dinkelbach, grid_maximize, simplex_grid
from covertsense.models import GaussianBanditModel, table12_model, table3_bandit

GRID_T12 = {"a": (0.024528278656636992, [0.0, 1.0]),
            "b": (0.01071208540906683, [0.5, 0.5]),
            "c": (0.03689547797931111, [1.0, 0.0])}
GRID_T3_COVERT = (0.03773780276325794, [0.392, 0.608])
GRID_T1_PLAIN = {"a": 0.3112386795830577, "b": 0.11314458059267944, "c": 0.3112386795830577}


@pytest.fixture(scope="module")
def t12():
    return table12_model(0.01)


def test_covert_ht_per_hypothesis(t12):
    sol = covert_ht_exponent(t12, eta=0.5)
    for lab, (value, argmax) in GRID_T12.items():
        assert sol.per_hypothesis[lab]["value"] == pytest.approx(value, abs=1e-6)
        assert sol.per_hypothesis[lab]["argmax_pbar"] == pytest.approx(argmax, abs=2e-3)
    assert sol.binding_hypothesis == "b"
    assert sol.value == pytest.approx(math.sqrt(2 * 0.5) * GRID_T12["b"][0], abs=1e-6)


def test_covert_ht_objective_at_argmax(t12):
    assert covert_ht_objective(t12, "b", [0.5, 0.5]) == pytest.approx(GRID_T12["b"][0], rel=1e-9)


def test_covert_value_scales_with_sqrt_eta(t12):
    v1 = covert_ht_exponent(t12, 0.5).value
    v2 = covert_ht_exponent(t12, 2.0).value
    assert v2 / v1 == pytest.approx(2.0, rel=1e-9)
    with pytest.raises(ValidationError):
        covert_ht_exponent(t12, 0.0)


def test_noncovert_ht_variants():
    m = table12_model()
    sol = noncovert_ht_exponent(m, "min-outside")
    assert sol.binding_hypothesis == "b"
    assert sol.argmax_pbar.probs == pytest.approx([0.5, 0.5], abs=1e-3)
    for lab, v in GRID_T1_PLAIN.items():
        assert sol.per_hypothesis[lab]["value"] == pytest.approx(v, abs=1e-6)
    # with the minimum inside the action sum, b scores zero on both actions
    assert noncovert_ht_exponent(m, "as-written").per_hypothesis["b"]["value"] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValidationError):
        noncovert_ht_exponent(m, "sideways")


def test_bai_exponents():
    b = table3_bandit()
    plain = noncovert_bai_exponent(b)
    assert plain.value == pytest.approx(0.03125, abs=1e-9)
    assert plain.argmax_pbar.probs == pytest.approx([0.5, 0.5], abs=1e-3)
    cov = covert_bai_exponent(b, eta=1.0)
    assert cov.value / math.sqrt(2.0) == pytest.approx(GRID_T3_COVERT[0], abs=1e-6)
    assert cov.argmax_pbar.probs == pytest.approx(GRID_T3_COVERT[1], abs=2e-3)
    assert covert_bai_objective([0.392, 0.608], b) == pytest.approx(GRID_T3_COVERT[0], rel=1e-9)


def test_alt_inf_closed_form():
    # 1/2 * min_x p_b p_x gap^2 / (p_b + p_x)
    assert alt_inf_gaussian([0.5, 0.5], [1.0, 0.5]) == pytest.approx(0.5 * 0.25 * 0.25 / 1.0)
    assert alt_inf_gaussian([0.2, 0.3, 0.5], [0.0, 1.0, 0.4]) == pytest.approx(
        0.5 * min(0.3 * 0.2 * 1.0 / 0.5, 0.3 * 0.5 * 0.36 / 0.8))


def test_bai_degenerate_denominator():
    with pytest.raises(DegenerateDenominator):
        bai_program([1.0, 0.5], [0.0, 0.0])
    with pytest.raises(DegenerateDenominator):
        covert_bai_exponent(GaussianBanditModel([0, 1, 0.5], [0, 1, -1]), 1.0)


def test_floored_bai_respects_floor():
    sol = covert_bai_exponent(table3_bandit(), 1.0, zeta_floor=0.45)
    assert sol.argmax_pbar.probs.min() >= 0.45 - 1e-12


def test_grid_points():
    pts = simplex_grid(3, 0.25)
    assert len(pts) == 15
    assert np.allclose(pts.sum(axis=1), 1.0)
    assert simplex_grid(2, 0.1, floor=0.3).min() >= 0.3 - 1e-12


@pytest.mark.parametrize("k", [1, 2, 3])
def test_dinkelbach_matches_grid_on_random_models(k):
    rng = np.random.default_rng(100 + k)
    m = random_model(rng, k)
    for lab in m.labels:
        prog = ht_program(m, lab)
        d, g = dinkelbach(prog), grid_maximize(prog)
        assert d.value >= g.value - 1e-6 * max(1.0, abs(g.value))
        assert d.value == pytest.approx(g.value, abs=1e-3 * max(1.0, abs(g.value)))


def test_estimator_front_end(t12):
    est = CovertExponent(mode="ht-covert", eta=0.5).fit(t12)
    assert est.get_params()["eta"] == 0.5
    assert est.score() == est.value_
    assert est.pbar_ == pytest.approx([0.5, 0.5], abs=2e-3)
    with pytest.raises(ValidationError):
        CovertExponent(mode="bai-covert").fit(t12)
    with pytest.raises(ValidationError):
        CovertExponent(mode="nope").fit(t12)
