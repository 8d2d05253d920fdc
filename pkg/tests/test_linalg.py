import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcast.linalg import ShapeError, activation, mode_product_quadratic

from oracles import quadratic_loops


def test_identity_slices_give_squared_norm():
    H = np.stack([np.eye(2)] * 3)
    np.testing.assert_array_equal(mode_product_quadratic(H, [3.0, 4.0]), [25.0, 25.0, 25.0])


def test_zero_state_gives_zero_vector():
    H = np.random.default_rng(0).normal(size=(5, 4, 4))
    np.testing.assert_array_equal(mode_product_quadratic(H, np.zeros(4)), np.zeros(5))


def test_matches_triple_loop_on_random_instance():
    rng = np.random.default_rng(1)
    H, x = rng.normal(size=(4, 3, 3)), rng.normal(size=3)
    np.testing.assert_allclose(mode_product_quadratic(H, x), quadratic_loops(H, x), rtol=0, atol=1e-12)


@pytest.mark.parametrize("H_shape, x_len", [((3, 4, 4), 3), ((3, 4, 5), 4), ((4, 4), 4)])
def test_shape_mismatch_is_rejected(H_shape, x_len):
    with pytest.raises(ShapeError):
        mode_product_quadratic(np.ones(H_shape), np.ones(x_len))


def test_shape_error_names_both_dims():
    with pytest.raises(ShapeError, match="4x4.*3"):
        mode_product_quadratic(np.ones((2, 4, 4)), np.ones(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_transposing_symmetric_slices_changes_nothing(n, M, seed):
    rng = np.random.default_rng(seed)
    A = rng.uniform(-1, 1, size=(M, n, n))
    H = A + A.transpose(0, 2, 1)
    x = rng.normal(size=n)
    Ht = np.ascontiguousarray(H.transpose(0, 2, 1))
    np.testing.assert_array_equal(mode_product_quadratic(H, x), mode_product_quadratic(Ht, x))
    # a strided view changes the summation order, so only roundoff-level agreement is promised
    np.testing.assert_allclose(mode_product_quadratic(H.transpose(0, 2, 1), x), mode_product_quadratic(H, x), atol=1e-12)


def test_activation_at_zero():
    v, dv = activation("sigmoid", [0.0])
    assert v[0] == 0.5 and dv[0] == 0.25
    v, dv = activation("tanh", [0.0])
    assert v[0] == 0.0 and dv[0] == 1.0
    v, dv = activation("relu", [0.0])
    assert v[0] == 0.0 and dv[0] == 0.0


def test_sigmoid_derivative_at_one_and_a_half():
    h = 1e-6
    fd = (activation("sigmoid", [1.5 + h])[0] - activation("sigmoid", [1.5 - h])[0]) / (2 * h)
    assert abs(activation("sigmoid", [1.5])[1][0] - fd[0]) < 1e-8


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "relu", "identity"])
@settings(max_examples=40, deadline=None)
@given(v=st.floats(-6, 6).filter(lambda t: abs(t) > 1e-3))
def test_activation_derivative_matches_finite_difference(kind, v):
    h = 1e-6
    fd = (activation(kind, [v + h])[0][0] - activation(kind, [v - h])[0][0]) / (2 * h)
    d = activation(kind, [v])[1][0]
    assert abs(d - fd) <= 1e-6 * max(abs(d), abs(fd), 1e-8) + 1e-10


def test_unknown_activation():
    with pytest.raises(ValueError):
        activation("softplus", [1.0])
