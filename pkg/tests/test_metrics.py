import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cddsgld.metrics import (
    CSV_COLUMNS,
    CalibrationBins,
    EvaluationReport,
    accuracy,
    batch_means_se,
    calibration_bins,
    ece,
    ensemble_predict,
    posterior_moment_error,
)
from cddsgld.models import GaussianPosterior, ModelSpec, predictive_distribution

SPEC = ModelSpec("softmax-mlp", 3, n_classes=4, hidden=5)


def _conf_rows(conf, n_classes, top):
    rest = (1 - conf) / (n_classes - 1)
    p = np.full(n_classes, rest)
    p[top] = conf
    return p


def test_ensemble_examples():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3))
    th = rng.normal(size=SPEC.dim)
    assert np.array_equal(ensemble_predict([th], SPEC, x), predictive_distribution(SPEC, th, x))
    many = rng.normal(size=(100, SPEC.dim))
    brute = sum(predictive_distribution(SPEC, t, x) for t in many) / 100
    assert np.max(np.abs(ensemble_predict(many, SPEC, x) - brute)) < 1e-12
    with pytest.raises(ValueError):
        ensemble_predict(np.empty((0, SPEC.dim)), SPEC, x)


def test_ensemble_of_opposite_certain_models_is_even():
    spec = ModelSpec("logistic-regression", 1)
    p = ensemble_predict(np.array([[0.0, -800.0], [0.0, 800.0]]), spec, np.zeros((1, 1)))
    assert np.allclose(p, [[0.5, 0.5]])


@given(hnp.arrays(np.float64, (7, SPEC.dim), elements=st.floats(-20, 20)))
def test_ensemble_is_a_distribution(samples):
    p = ensemble_predict(samples, SPEC, np.linspace(-2, 2, 9).reshape(3, 3))
    assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_ece_fixtures():
    # perfect calibration: 10 predictions at 0.7 with 7 hits
    p = np.array([_conf_rows(0.7, 2, 0)] * 10)
    y = np.array([0] * 7 + [1] * 3)
    assert ece(p, y) == pytest.approx(0.0, abs=1e-12)

    p = np.array([_conf_rows(0.8, 3, 0)] * 4)
    assert ece(p, np.array([0, 0, 1, 2])) == pytest.approx(0.3, abs=1e-12)

    bins = CalibrationBins(np.array([3, 1]), np.array([0.9, 1.0]), np.array([0.8, 1.0]))
    assert bins.ece() == pytest.approx(0.075, abs=1e-12)
    # the same two bins realised with whole items: 27 of 30 right at 0.8, 10 of 10 at 1.0
    p = np.array([_conf_rows(0.8, 6, 0)] * 30 + [_conf_rows(1.0, 6, 2)] * 10)
    y = np.array([0] * 27 + [1] * 3 + [2] * 10)
    assert ece(p, y) == pytest.approx(0.075, abs=1e-12)


def test_bins_are_right_inclusive():
    p = np.array([_conf_rows(0.8, 2, 0), _conf_rows(0.8000001, 2, 0), _conf_rows(0.5, 2, 0)])
    b = calibration_bins(p, np.zeros(3, dtype=int), 10)
    assert b.counts[7] == 1 and b.counts[8] == 1 and b.counts[4] == 1


def test_ece_rejects_bad_labels():
    with pytest.raises(ValueError):
        ece(np.array([[0.5, 0.5]]), np.array([2]))
    with pytest.raises(ValueError):
        accuracy(np.array([[0.5, 0.5]]), np.array([0, 1]))


def test_accuracy_examples():
    p = np.eye(3)[[0, 1, 2, 0, 1]]
    assert accuracy(p, np.array([0, 1, 2, 0, 1])) == 1.0
    assert accuracy(p, np.array([1, 2, 0, 1, 2])) == 0.0
    assert accuracy(p, np.array([0, 1, 2, 2, 2])) == 0.6
    assert accuracy(np.array([[0.5, 0.5]]), np.array([0])) == 1.0


def _random_predictions(rng, n, c):
    logits = rng.normal(scale=3.0, size=(n, c))
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True), rng.integers(0, c, size=n)


def test_single_bin_ece_is_accuracy_confidence_gap():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        p, y = _random_predictions(rng, int(rng.integers(1, 60)), int(rng.integers(2, 7)))
        gap = abs(np.mean(np.argmax(p, axis=1) == y) - p.max(axis=1).mean())
        assert abs(ece(p, y, n_bins=1) - gap) < 1e-12


@given(st.integers(0, 2**32 - 1), st.integers(1, 20))
def test_ece_is_permutation_invariant_and_bounded(seed, bins):
    rng = np.random.default_rng(seed)
    p, y = _random_predictions(rng, 50, 4)
    perm = rng.permutation(50)
    a, b = ece(p, y, bins), ece(p[perm], y[perm], bins)
    assert a == pytest.approx(b, abs=1e-12)
    assert 0 <= a <= 1
    assert ece(p, y, bins) == a


def test_posterior_moment_error_examples():
    mu = np.array([1.0, 2.0])
    post = GaussianPosterior(mu, np.diag([0.5, 2.0]))
    same = np.tile(mu, (10, 1))
    assert posterior_moment_error(same, post) == (0.0, 1.0)
    rng = np.random.default_rng(0)
    x = rng.multivariate_normal(mu, post.covariance, size=1000)
    delta = np.array([0.3, -0.4])
    shifted = x - x.mean(axis=0) + mu + delta
    assert posterior_moment_error(shifted, post)[0] == pytest.approx(0.5 / np.linalg.norm(mu))
    with pytest.raises(ValueError):
        posterior_moment_error(mu[None, :], post)


def test_posterior_moment_error_clt_bound():
    mu = np.array([1.0, -1.0, 0.5])
    cov = np.array([[1.0, 0.3, 0.0], [0.3, 2.0, 0.1], [0.0, 0.1, 0.5]])
    x = np.random.default_rng(3).multivariate_normal(mu, cov, size=100_000)
    mean_err, cov_err = posterior_moment_error(x, GaussianPosterior(mu, cov))
    assert mean_err < 3 * np.sqrt(np.trace(cov) / 100_000) / np.linalg.norm(mu)
    assert cov_err < 0.02


def test_batch_means_se_for_iid_chain():
    x = np.random.default_rng(4).normal(size=(50_000, 2))
    se = batch_means_se(x)
    assert np.allclose(se, 1 / np.sqrt(50_000), rtol=0.3)


def test_report_serialisation():
    rep = EvaluationReport("cd-dsgld", "ring", 20.0, 3, accuracy=0.5, ece=0.25, retained_samples=500)
    row = rep.csv_row()
    assert len(row) == len(CSV_COLUMNS)
    assert row[:6] == ["cd-dsgld", "ring", "20.0", "3", "0.5", "0.25"] and row[6] == ""
    assert '"ece": 0.25' in rep.to_json()
