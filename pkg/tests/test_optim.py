import math

import numpy as np
import pytest

from tracernet.errors import NonFiniteError, ShapeError
from tracernet.optim import AdamState, adam_step
from tracernet.tensor import Tensor


def scalar_adam(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, p=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_zero_gradient_leaves_parameters():
    p = Tensor(np.array([1.0, -2.0]))
    adam_step([p], [np.zeros(2)], AdamState())
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_first_step_moves_by_learning_rate():
    p = Tensor(np.array([0.0]))
    adam_step([p], [np.array([1.0])], AdamState())
    assert p.data[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


@pytest.mark.parametrize("grads", [[1.0, 1.0], [0.3, -2.0, 0.7], [1e-4] * 5])
def test_matches_scalar_recurrence(grads):
    p = Tensor(np.array([0.0]))
    state = AdamState()
    for g in grads:
        adam_step([p], [np.array([g])], state)
    assert p.data[0] == pytest.approx(scalar_adam(grads), rel=1e-12, abs=1e-15)
    assert state.step_count == len(grads)


def test_nonfinite_gradient_names_parameter_and_leaves_model():
    a, b = Tensor(np.ones(2)), Tensor(np.ones(3))
    with pytest.raises(NonFiniteError, match="level0.down.conv1.weight"):
        adam_step([a, b], [np.zeros(2), np.array([0.0, np.nan, 0.0])], AdamState(),
                  ["final.conv.bias", "level0.down.conv1.weight"])
    np.testing.assert_array_equal(a.data, 1.0)


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        adam_step([Tensor(np.ones(2))], [np.ones(3)], AdamState())
