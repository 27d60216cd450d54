from pathlib import Path

import numpy as np
import pytest

from covertsense.errors import ModelError, ValidationError
from covertsense.models import (
    GaussianBanditModel,
    HypothesisModel,
    load_model,
    model_from_json,
    project_floored_simplex,
    project_simplex,
    table12_model,
    table3_bandit,
)

REPO = Path(__file__).resolve().parents[1]


def test_builtin_models_load():
    m = load_model("builtin:table12")
    assert m.labels == ("a", "b", "c")
    assert np.allclose(m.alice, table12_model().alice, atol=1e-10)
    b = load_model("builtin:table3")
    assert isinstance(b, GaussianBanditModel)
    assert b.best_arm == 1 and b.n_effective == 2


def test_repo_model_files_match_builtins():
    for name in ("table12", "table3"):
        repo = load_model(str(REPO / "models" / f"{name}.json"))
        assert repo.to_json() == load_model(f"builtin:{name}").to_json()


def test_missing_file_names_the_path():
    with pytest.raises(ModelError, match="nowhere.json"):
        load_model("nowhere.json")


def test_unknown_keys_rejected():
    doc = table12_model().to_json() | {"colour": "red"}
    with pytest.raises(ModelError, match="colour"):
        model_from_json(doc)
    with pytest.raises(ModelError):
        model_from_json({"alice_means": [0, 1, 0.5], "willie_means": [0, 1, 0.5], "x": 1})


def test_informative_null_action_rejected():
    alice = [[[0.5, 0.5], [0.1, 0.9]], [[0.4, 0.6], [0.9, 0.1]]]
    willie = [[[0.9, 0.1], [0.5, 0.5]]] * 2
    with pytest.raises(ModelError, match="null action"):
        HypothesisModel(("x", "y"), alice, willie)


def test_reachable_idle_law_rejected():
    alice = [[[0.5, 0.5], [0.1, 0.9], [0.3, 0.7]], [[0.5, 0.5], [0.9, 0.1], [0.6, 0.4]]]
    # idle law (0.5, 0.5) is the midpoint of the two effective outputs
    willie = [[[0.5, 0.5], [0.2, 0.8], [0.8, 0.2]]] * 2
    with pytest.raises(ModelError, match="reproduces"):
        HypothesisModel(("x", "y"), alice, willie)


def test_indistinguishable_pair_rejected():
    alice = [[[0.5, 0.5], [0.2, 0.8]], [[0.5, 0.5], [0.2, 0.8]]]
    willie = [[[0.9, 0.1], [0.5, 0.5]]] * 2
    with pytest.raises(ModelError, match="not distinguishable"):
        HypothesisModel(("x", "y"), alice, willie)


def test_regularize_null():
    m = table12_model()
    assert m.null_is_degenerate()
    r = m.regularize_null(0.01)
    assert not r.null_is_degenerate()
    assert r.willie[0, 0].tolist() == pytest.approx([0.995, 0.005])
    with pytest.raises(ValidationError):
        m.regularize_null(0.0)


def test_divergence_table_zero_entries():
    d = table12_model().divergences
    # a and b share the first action's law
    assert d[0, 1, 1] == 0.0
    assert d[0, 1, 2] > 0


def test_gaussian_model_validation():
    with pytest.raises(ModelError):
        GaussianBanditModel([0.1, 1.0, 0.5], [0.0, 1.0, 0.5])
    with pytest.raises(ModelError):
        GaussianBanditModel([0.0, 1.0, 1.0], [0.0, 1.0, 0.5])
    assert table3_bandit().to_json() == {"alice_means": [0.0, 1.0, 0.5], "willie_means": [0.0, 1.0, 0.5]}


def test_simplex_projections(rng):
    for _ in range(50):
        y = rng.normal(size=4)
        p = project_simplex(y)
        assert p.min() >= 0 and p.sum() == pytest.approx(1.0)
        q = project_floored_simplex(y, 0.1)
        assert q.min() >= 0.1 - 1e-12 and q.sum() == pytest.approx(1.0)
