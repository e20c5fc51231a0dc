import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuraltd.errors import ConfigurationError
from neuraltd.features import (
    FeatureMap,
    grid_features,
    one_hot_features,
    one_hot_game_features,
    random_unit_features,
)


def test_one_hot_examples():
    np.testing.assert_array_equal(one_hot_features(1, 1).table, [[1.0]])
    fm = one_hot_features(2, 2)
    np.testing.assert_array_equal(fm(fm.pair_index(1, 0)), [0, 0, 1, 0])
    np.testing.assert_array_equal(fm.table @ fm.table.T, np.eye(4))


def test_one_hot_game_indexing():
    fm = one_hot_game_features(2, 2, 3)
    assert fm.pair_index(1, 1, 2) == (1 * 2 + 1) * 3 + 2
    assert fm.state_block(1).shape == (6, 12)


def test_random_unit_single_row():
    fm = random_unit_features(1, 5, seed=0)
    assert abs(np.linalg.norm(fm.table[0]) - 1.0) <= 1e-12


def test_random_unit_min_angle():
    fm = random_unit_features(3, 8, seed=0)
    cos = np.abs(fm.table @ fm.table.T)[np.triu_indices(3, 1)]
    assert np.all(cos < math.cos(math.radians(1.0)))


def test_random_unit_deterministic():
    assert random_unit_features(4, 3, seed=5).table.tobytes() == random_unit_features(4, 3, seed=5).table.tobytes()


def test_random_unit_errors():
    with pytest.raises(ConfigurationError):
        random_unit_features(3, 1)
    with pytest.raises(ConfigurationError):
        # three rows in the plane cannot be 80 degrees apart pairwise
        random_unit_features(3, 2, seed=0, min_angle=math.radians(80), max_redraws=200)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(2, 6), st.integers(0, 1000))
def test_random_unit_properties(n, d, seed):
    fm = random_unit_features(n, d, seed=seed, min_angle=math.radians(0.5))
    np.testing.assert_allclose(np.linalg.norm(fm.table, axis=1), 1.0, atol=1e-12)
    cos = np.abs(fm.table @ fm.table.T)[np.triu_indices(n, 1)]
    assert np.all(cos < 1 - 1e-9)


def test_grid_examples():
    fm, asg = grid_features([0.3], 4, 0.0, 1.0)
    assert fm.dim == 1
    np.testing.assert_array_equal(fm.table, [[1.0]])
    fm, asg = grid_features([0.11, 0.12], 4, 0.0, 1.0)
    assert asg.rows[0] == asg.rows[1]
    fm, asg = grid_features([0.1, 0.9], 2, 0.0, 1.0)
    a, b = fm.table[asg.rows]
    assert a @ b == 0.0 and asg.rows[0] != asg.rows[1]


def test_grid_clamps_and_counts():
    fm, asg = grid_features([[-1.0, 0.5], [0.2, 0.5], [2.0, 2.0]], [2, 2], [0, 0], [1, 1])
    assert asg.n_clamped == 2
    assert asg.rows[0] == asg.rows[1]
    assert asg.cells[asg.rows[2]] == (1, 1)


def test_grid_errors():
    with pytest.raises(ConfigurationError):
        grid_features([0.5], 2, 1.0, 0.0)
    with pytest.raises(ConfigurationError):
        grid_features([0.5], 0, 0.0, 1.0)


def test_feature_map_validation_and_json():
    with pytest.raises(ConfigurationError):
        FeatureMap(np.array([[1.0, 1.0]]))
    with pytest.raises(ConfigurationError):
        FeatureMap(np.eye(3), action_shape=(2,))
    fm = one_hot_game_features(1, 2, 2)
    back = FeatureMap.from_json(fm.to_json())
    assert back.table.tobytes() == fm.table.tobytes()
    assert back.action_shape == (2, 2)
    with pytest.raises(ConfigurationError):
        FeatureMap(np.eye(2)).pair_index(0, 0)
