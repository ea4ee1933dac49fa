import numpy as np
import pytest

from histoage.age.gbt import FeatureBinner, fit_gbt
from histoage.utils.errors import DataError


@pytest.fixture
def linear_data(rng):
    X = rng.uniform(0.0, 1.0, size=(200, 2))
    return X, 3.0 * X[:, 0]


def test_learns_a_linear_signal(linear_data):
    X, y = linear_data
    member = fit_gbt(X[:150], y[:150], depth=3, trees=100, eta=0.1)
    test_mae = np.mean(np.abs(member.predict(X[150:]) - y[150:]))
    baseline = np.mean(np.abs(y[:150].mean() - y[150:]))
    assert test_mae * 5 < baseline


def test_training_loss_never_increases(linear_data):
    X, y = linear_data
    member = fit_gbt(X, y, depth=2, trees=30)
    loss = np.asarray(member.train_loss)
    assert len(loss) == 31
    assert np.all(np.diff(loss) <= 1e-12)


def test_no_trees_predicts_the_mean(linear_data):
    X, y = linear_data
    member = fit_gbt(X, y, trees=0)
    np.testing.assert_allclose(member.predict(X[:5]), np.full(5, y.mean()))


def test_single_stump_without_penalty_is_exact():
    member = fit_gbt([[0.0], [1.0]], [0.0, 2.0], depth=1, trees=1, eta=1.0, lam=0.0)
    np.testing.assert_allclose(member.predict([[0.0], [1.0]]), [0.0, 2.0])
    assert member.trees[0].n_leaves == 2


def test_column_subsampling_is_seeded(linear_data):
    X, y = linear_data
    X = np.column_stack([X, X[:, ::-1]])
    first = fit_gbt(X, y, trees=10, colsample=0.5, seed=4)
    second = fit_gbt(X, y, trees=10, colsample=0.5, seed=4)
    np.testing.assert_array_equal(first.predict(X), second.predict(X))


def test_bad_inputs():
    with pytest.raises(DataError):
        fit_gbt(np.zeros((3, 2)), np.zeros(4))
    with pytest.raises(DataError):
        fit_gbt(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(DataError):
        fit_gbt(np.zeros((3, 2)), np.zeros(3), eta=0.0)
    with pytest.raises(DataError):
        fit_gbt(np.zeros((3, 2)), np.zeros(3), lam=-1.0)


def test_binner_codes_respect_edges():
    binner = FeatureBinner(max_bins=4).fit(np.array([[0.0], [1.0], [2.0]]))
    np.testing.assert_allclose(binner.edges[0], [0.5, 1.5])
    assert binner.transform(np.array([[0.4], [0.5], [9.0]]))[:, 0].tolist() == [0, 1, 2]
