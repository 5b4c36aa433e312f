import json
import math

import numpy as np
import pytest

from riskcascade.errors import DegenerateDataError, DimensionError
from riskcascade.mlmodels import (
    ModelKind,
    TrainedModel,
    TreeNode,
    cross_validate,
    logistic_gradient,
    logistic_loss,
    predict_proba,
    train,
)


def separable_corpus(n=400, seed=11):
    """Positives: intent set with high distress; negatives: all-zero with low distress."""
    rng = np.random.default_rng(seed)
    X = np.zeros((n, 9))
    y = np.zeros(n)
    for i in range(n):
        pos = i % 2 == 0
        y[i] = 1.0 if pos else 0.0
        if pos:
            X[i, 0] = 1.0
            X[i, 3] = 1.0
            X[i, 5] = float(rng.integers(0, 2))
        else:
            X[i, 1] = 1.0
        X[i, 8] = float(rng.integers(10, 60))
    return X, y


FIXTURE_X = np.array([
    [1, 0, 0, 1, 0, 0, 0, 0, 24.0],
    [0, 1, 0, 0, 0, 0, 0, 0, 12.0],
    [0, 0, 1, 0, 0, 1, 0, 0, 30.0],
    [1, 0, 0, 0, 1, 0, 1, 0, 18.0],
    [0, 0, 0, 1, 0, 0, 0, 1, 6.0],
])
FIXTURE_Y = np.array([1.0, 0.0, 1.0, 0.0, 1.0])


def test_every_kind_reaches_95_percent_holdout():
    X, y = separable_corpus()
    Xtr, ytr, Xte, yte = X[:320], y[:320], X[320:], y[320:]
    for kind in ModelKind:
        model = train(kind, Xtr, ytr, seed=3)
        preds = np.array([predict_proba(model, x) >= 0.5 for x in Xte])
        assert np.mean(preds == (yte == 1.0)) >= 0.95, kind


def test_constant_labels_rejected():
    X, _ = separable_corpus(20)
    with pytest.raises(DegenerateDataError):
        train(ModelKind.LOGISTIC_REGRESSION, X, np.ones(20))


def test_wrong_row_dimension_rejected():
    with pytest.raises(DimensionError):
        train(ModelKind.RANDOM_FOREST, np.zeros((10, 4)), np.arange(10) % 2)


def test_same_data_and_seed_serialize_identically():
    X, y = separable_corpus(60)
    for kind in ModelKind:
        a = train(kind, X, y, seed=17)
        b = train(kind, X, y, seed=17)
        assert json.dumps(a.to_payload(), sort_keys=True) == json.dumps(b.to_payload(), sort_keys=True)


def test_different_seed_changes_the_forest():
    X, y = separable_corpus(60)
    a = train(ModelKind.RANDOM_FOREST, X, y, {"n_trees": 10}, seed=1)
    b = train(ModelKind.RANDOM_FOREST, X, y, {"n_trees": 10}, seed=2)
    assert json.dumps(a.to_payload()) != json.dumps(b.to_payload())


def test_zero_weight_logistic_predicts_half():
    model = TrainedModel(ModelKind.LOGISTIC_REGRESSION, weights=np.zeros(9), bias=0.0)
    assert predict_proba(model, np.arange(9.0)) == 0.5


def test_all_positive_forest_predicts_one():
    trees = [TreeNode(value=1.0) for _ in range(7)]
    model = TrainedModel(ModelKind.RANDOM_FOREST, trees=trees)
    assert predict_proba(model, np.zeros(9)) == 1.0


def test_hand_built_boosted_stump_matches_sigmoid():
    stump = TreeNode(feature=0, threshold=0.5,
                     left=TreeNode(value=-2.0), right=TreeNode(value=2.0))
    model = TrainedModel(ModelKind.GRADIENT_BOOSTED_TREES, trees=[stump],
                         base_score=0.0, shrinkage=1.0)
    x = np.zeros(9)
    assert abs(predict_proba(model, x) - 1.0 / (1.0 + math.exp(2.0))) < 1e-12
    x[0] = 1.0
    assert abs(predict_proba(model, x) - 1.0 / (1.0 + math.exp(-2.0))) < 1e-12


def test_forest_probability_monotone_in_positive_votes():
    X, y = separable_corpus(60)
    model = train(ModelKind.RANDOM_FOREST, X, y, {"n_trees": 15}, seed=4)
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.uniform(0, 2, 9)
        before = predict_proba(model, x)
        grown = TrainedModel(ModelKind.RANDOM_FOREST, trees=model.trees + [TreeNode(value=1.0)])
        assert predict_proba(grown, x) >= before


def test_predict_dimension_guard():
    model = TrainedModel(ModelKind.LOGISTIC_REGRESSION, weights=np.zeros(9), bias=0.0)
    with pytest.raises(DimensionError):
        predict_proba(model, np.zeros(4))


def test_logistic_gradient_matches_central_differences():
    w = np.array([0.3, -0.2, 0.1, 0.5, -0.4, 0.2, -0.1, 0.3, 0.01])
    b = -0.15
    l2 = 1e-4
    grad_w, grad_b = logistic_gradient(w, b, FIXTURE_X, FIXTURE_Y, l2)
    eps = 1e-6
    fd = np.zeros(10)
    for i in range(9):
        wp, wm = w.copy(), w.copy()
        wp[i] += eps
        wm[i] -= eps
        fd[i] = (logistic_loss(wp, b, FIXTURE_X, FIXTURE_Y, l2)
                 - logistic_loss(wm, b, FIXTURE_X, FIXTURE_Y, l2)) / (2 * eps)
    fd[9] = (logistic_loss(w, b + eps, FIXTURE_X, FIXTURE_Y, l2)
             - logistic_loss(w, b - eps, FIXTURE_X, FIXTURE_Y, l2)) / (2 * eps)
    analytic = np.append(grad_w, grad_b)
    assert np.linalg.norm(analytic - fd) / np.linalg.norm(fd) <= 1e-4


def test_logistic_gradient_vanishes_at_the_optimum():
    model = train(ModelKind.LOGISTIC_REGRESSION, FIXTURE_X, FIXTURE_Y,
                  {"epochs": 20000, "learning_rate": 1.0, "l2": 1e-4}, seed=0)
    grad_w, grad_b = logistic_gradient(model.weights, model.bias, FIXTURE_X, FIXTURE_Y, 1e-4)
    assert np.linalg.norm(np.append(grad_w, grad_b)) <= 1e-3


def test_save_load_round_trip_exact(tmp_path):
    X, y = separable_corpus(80)
    rng = np.random.default_rng(5)
    vectors = rng.uniform(0, 2, (100, 9))
    for kind in ModelKind:
        model = train(kind, X, y, seed=6)
        path = tmp_path / f"{kind.value}.json"
        model.save(path)
        loaded = TrainedModel.load(path)
        for x in vectors:
            assert predict_proba(model, x) == predict_proba(loaded, x)


def test_load_rejects_wrong_dimension(tmp_path):
    X, y = separable_corpus(40)
    model = train(ModelKind.LINEAR_SVM, X, y, seed=0)
    path = tmp_path / "m.json"
    model.save(path)
    from riskcascade.modelio import load_model
    with pytest.raises(DimensionError):
        load_model(path, expected_dim=16)


def test_cross_validate_single_point_grid():
    X, y = separable_corpus(100)
    grid = [{"epochs": 50, "learning_rate": 0.2, "l2": 1e-4}]
    hp, f1 = cross_validate(ModelKind.LOGISTIC_REGRESSION, X, y, folds=5, grid=grid, seed=0)
    assert hp == grid[0]
    assert 0.0 <= f1 <= 1.0


def test_cross_validate_perfect_on_separable():
    X, y = separable_corpus(200)
    _, f1 = cross_validate(ModelKind.LOGISTIC_REGRESSION, X, y, folds=5, seed=0)
    assert f1 == 1.0


def test_cross_validate_tie_breaks_to_first_grid_point():
    X, y = separable_corpus(100)
    grid = [{"epochs": 80, "learning_rate": 0.3}, {"epochs": 81, "learning_rate": 0.3}]
    hp, _ = cross_validate(ModelKind.LOGISTIC_REGRESSION, X, y, folds=4, grid=grid, seed=0)
    assert hp == grid[0]


def test_cross_validate_too_many_folds():
    X, y = separable_corpus(4)
    with pytest.raises(ValueError):
        cross_validate(ModelKind.LOGISTIC_REGRESSION, X, y, folds=5)
