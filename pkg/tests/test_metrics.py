import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize

from conftest import make_dataset
from sharpdro import metrics
from sharpdro.autodiff import ModelSpec, ParameterVector, loss_and_grad
from sharpdro.datagen import CorruptedDataset
from sharpdro.errors import PreconditionError
from sharpdro.methods import PerturbRule, epsilon_star

SIGN = PerturbRule("sign", 0.05)


def replicated(data_X, y, groups):
    n = len(y)
    return CorruptedDataset(np.tile(data_X, (groups, 1)), np.tile(y, groups),
                            np.repeat(np.arange(groups), n), int(y.max()) + 1, groups - 1)


def test_perfect_predictions_give_full_accuracy():
    model = ModelSpec(3, 3)
    theta = ParameterVector.flatten({"W0": 10 * np.eye(3), "b0": np.zeros(3)}, model.layout())
    data = replicated(np.eye(3), np.arange(3), 4)
    np.testing.assert_array_equal(metrics.per_severity_accuracy(model, theta, data), 1.0)


def test_chance_level_accuracy():
    rng = np.random.default_rng(0)
    n = 12_000
    X = rng.normal(size=(n, 2))
    data = CorruptedDataset(X, rng.integers(0, 2, n), np.arange(n) % 3, 2, 2)
    model = ModelSpec(2, 2)
    acc = metrics.per_severity_accuracy(model, model.init(rng), data)
    assert np.all(np.abs(acc - 0.5) <= 0.05)


def test_accuracy_invariant_to_class_relabelling(small_data):
    model = ModelSpec(3, 3)
    theta = model.init(np.random.default_rng(1), scale=2.0)
    perm = np.array([2, 0, 1])
    parts = theta.unflatten()
    permuted = ParameterVector.flatten({"W0": parts["W0"][:, perm], "b0": parts["b0"][perm]}, theta.layout)
    relabelled = CorruptedDataset(small_data.X, np.argsort(perm)[small_data.y], small_data.severity, 3, 2)
    np.testing.assert_array_equal(metrics.per_severity_accuracy(model, theta, small_data),
                                  metrics.per_severity_accuracy(model, permuted, relabelled))


def test_missing_severity_is_nan(small_model):
    d = make_dataset(max_severity=1)
    data = CorruptedDataset(d.X, d.y, d.severity, 3, 3)
    theta = small_model.init(np.random.default_rng(0))
    m = metrics.evaluate(small_model, theta, data, SIGN)
    for key in ("accuracy", "loss", "sharpness", "grad_norm"):
        assert np.all(np.isnan(m[key][2:])) and not np.any(np.isnan(m[key][:2]))


def test_zero_radius_sharpness_is_zero(small_model, small_data):
    theta = small_model.init(np.random.default_rng(2))
    out = metrics.per_severity_sharpness(small_model, theta, small_data, PerturbRule("sign", 0.0))
    np.testing.assert_array_equal(out, 0.0)


def test_sharpness_is_nonnegative_at_a_convex_minimum():
    # cross-entropy of a linear model is convex; noisy labels keep the minimiser finite
    rng = np.random.default_rng(3)
    n = 90
    y = rng.integers(0, 2, n)
    X = rng.normal(size=(n, 2)) + 0.5 * y[:, None]
    data = CorruptedDataset(X, y, np.arange(n) % 3, 2, 2)
    model = ModelSpec(2, 2)
    base = model.zeros()

    def f(v):
        loss, g = loss_and_grad(model, base.with_values(v), X, y)
        return loss, g.values

    res = minimize(f, base.values, jac=True, method="BFGS", options={"gtol": 1e-10})
    theta = base.with_values(res.x)
    assert np.all(metrics.per_severity_sharpness(model, theta, data, SIGN) >= 0.0)
    assert metrics.empirical_sharpness(model, theta, X, y, SIGN) >= 0.0


def test_sharpness_equals_exhaustive_oracle_when_patterns_agree():
    model = ModelSpec(2, 2)
    data = make_dataset(n=40, dim=2, classes=2, seed=4)
    rng = np.random.default_rng(4)
    agreed = 0
    for _ in range(20):
        theta = model.zeros().with_values(rng.normal(size=model.num_params))
        R = metrics.empirical_sharpness(model, theta, data.X, data.y, SIGN)
        best, pattern = metrics.sign_pattern_sharpness(model, theta, data.X, data.y, 0.05)
        _, g = loss_and_grad(model, theta, data.X, data.y)
        assert R <= best + 1e-12
        if np.array_equal(np.sign(g.values), pattern):
            agreed += 1
            assert R == pytest.approx(best, rel=1e-12, abs=1e-15)
    assert agreed > 0


def test_exhaustive_oracle_refuses_large_models(small_model, small_data):
    with pytest.raises(PreconditionError):
        metrics.sign_pattern_sharpness(small_model, small_model.zeros(), small_data.X, small_data.y, 0.05)


def test_grad_norm_identical_groups_and_scaling(small_model):
    d = make_dataset(n=20)
    data = replicated(d.X, d.y, 3)
    theta = small_model.init(np.random.default_rng(5))
    norms = metrics.per_severity_grad_norm(small_model, theta, data)
    assert norms[0] == norms[1] == norms[2]
    np.testing.assert_allclose(metrics.per_severity_grad_norm(small_model, theta, data, loss_scale=2.0),
                               2 * norms, rtol=1e-15)


def test_grad_norm_matches_direct_gradient(small_model, small_data):
    theta = small_model.init(np.random.default_rng(6))
    norms = metrics.per_severity_grad_norm(small_model, theta, small_data)
    rows = small_data.severity == 1
    _, g = loss_and_grad(small_model, theta, small_data.X[rows], small_data.y[rows])
    assert norms[1] == np.linalg.norm(g.values)


def _digest(theta, data):
    return hashlib.sha256(theta.values.tobytes()).hexdigest(), data.content_hash()


def test_evaluation_does_not_mutate_inputs(small_model, small_data):
    theta = small_model.init(np.random.default_rng(7))
    before = _digest(theta, small_data)
    metrics.evaluate(small_model, theta, small_data, SIGN)
    metrics.loss_surface_slice(small_model, theta, small_data, 0.5, 3, seed=0)
    assert _digest(theta, small_data) == before


# --------------------------------------------------------------------------
# OOD histograms


@given(st.lists(st.tuples(st.floats(0, 10), st.integers(0, 5)), min_size=1, max_size=80),
       st.integers(1, 30))
def test_histogram_conserves_counts(pairs, bins):
    scores = np.array([p[0] for p in pairs])
    sev = np.array([p[1] for p in pairs])
    h = metrics.ood_histogram(scores, sev, 6, bins)
    np.testing.assert_array_equal(h["counts"].sum(axis=1), np.bincount(sev, minlength=6))
    assert h["edges"][0] == 0.0 and len(h["edges"]) == bins + 1


def test_equal_scores_occupy_a_single_bin():
    sev = np.array([0, 0, 1, 2, 2, 2])
    h = metrics.ood_histogram(np.ones(6), sev, 3, bins=10)
    assert np.all(np.count_nonzero(h["counts"], axis=1) == 1)
    np.testing.assert_array_equal(h["means"], 1.0)


def test_histogram_means_and_missing_groups():
    h = metrics.ood_histogram(np.array([0.0, 2.0, 1.0]), np.array([0, 0, 2]), 4, bins=4)
    np.testing.assert_array_equal(h["means"][[0, 2]], [1.0, 1.0])
    assert np.isnan(h["means"][1]) and np.isnan(h["means"][3])


def test_spearman_matches_scipy_and_ignores_nan():
    from scipy.stats import spearmanr

    x = np.array([0, 1, 2, 3, 4, 5.0])
    y = np.array([0.2, 0.1, 0.5, 0.4, 0.9, np.nan])
    assert metrics.spearman(x, y) == pytest.approx(spearmanr(x[:5], y[:5]).statistic)
    assert np.isnan(metrics.spearman([1.0], [2.0]))


# --------------------------------------------------------------------------
# loss surface


def test_surface_centre_is_the_current_loss(small_model, small_data):
    theta = small_model.init(np.random.default_rng(8))
    sl = metrics.loss_surface_slice(small_model, theta, small_data, 1.0, 5, seed=1)
    np.testing.assert_array_equal(sl.values[:, 2, 2], metrics.per_severity_loss(small_model, theta, small_data))
    assert sl.values.shape == (3, 5, 5)
    assert sl.offsets[2] == 0.0


def test_zero_radius_surface_is_flat(small_model, small_data):
    theta = small_model.init(np.random.default_rng(9))
    sl = metrics.loss_surface_slice(small_model, theta, small_data, 0.0, 3, seed=1)
    np.testing.assert_array_equal(sl.values, np.broadcast_to(sl.values[:, 1:2, 1:2], sl.values.shape))


@given(st.integers(2, 60), st.integers(0, 1000))
def test_random_directions_are_orthonormal(k, seed):
    d = metrics.random_directions(k, seed)
    np.testing.assert_allclose(d @ d.T, np.eye(2), rtol=0, atol=1e-10)


def test_swapping_directions_transposes_the_grid(small_model, small_data):
    theta = small_model.init(np.random.default_rng(10))
    dirs = metrics.random_directions(len(theta), 3)
    a = metrics.loss_surface_slice(small_model, theta, small_data, 0.7, 5, 0, directions=dirs)
    b = metrics.loss_surface_slice(small_model, theta, small_data, 0.7, 5, 0, directions=dirs[::-1])
    # equal up to the order of the two offset additions
    np.testing.assert_allclose(a.values, b.values.transpose(0, 2, 1), rtol=1e-14)


def test_even_resolution_is_rejected(small_model, small_data):
    with pytest.raises(PreconditionError):
        metrics.loss_surface_slice(small_model, small_model.zeros(), small_data, 1.0, 4, 0)


def test_epsilon_used_by_sharpness_comes_from_the_group_gradient(small_model, small_data):
    theta = small_model.init(np.random.default_rng(11))
    rows = small_data.severity == 2
    X, y = small_data.X[rows], small_data.y[rows]
    base, g = loss_and_grad(small_model, theta, X, y)
    eps = epsilon_star(g, SIGN)
    hat, _ = loss_and_grad(small_model, theta.with_values(theta.values + eps.values), X, y)
    assert metrics.per_severity_sharpness(small_model, theta, small_data, SIGN)[2] == hat - base
