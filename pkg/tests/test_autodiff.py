import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metasre import autodiff as ad
from metasre.errors import InvalidDistribution, InvalidValue, NotScalar, ShapeError

from helpers import central_diff, check_primitives_against_fd, max_rel_err


def scalar(x, trainable=True):
    return ad.leaf(np.asarray(float(x)), trainable=trainable)


class TestLeaf:
    def test_identity_construction(self):
        n = ad.leaf([[1.0, 2.0]], trainable=True)
        assert n.shape == (1, 2)
        assert n.requires_grad

    def test_zero_leaf_contributes_through_uses_only(self):
        x = scalar(0.0)
        y = scalar(3.0)
        (gx,) = ad.grad(ad.mul(y, y), [x])
        assert np.array_equal(gx.value, np.zeros(()))

    def test_nan_rejected(self):
        with pytest.raises(InvalidValue):
            ad.leaf([np.nan, 0.0, 1.0])


class TestScalarExamples:
    def test_square_grad(self):
        x = scalar(3.0)
        (g,) = ad.grad(ad.mul(x, x), [x])
        assert g.value == pytest.approx(6.0)

    def test_cube_grad_of_grad(self):
        x = scalar(2.0)
        f = ad.mul(ad.mul(x, x), x)
        (g1,) = ad.grad(f, [x], create_graph=True)
        (g2,) = ad.grad(g1, [x])
        assert g1.value == pytest.approx(12.0)
        assert g2.value == pytest.approx(12.0)

    def test_non_scalar_objective_rejected(self):
        x = ad.leaf([[1.0, 2.0]], trainable=True)
        with pytest.raises(NotScalar):
            ad.grad(x, [x])


class TestPrimitiveValues:
    def test_softmax_symmetry(self):
        s = ad.softmax_rows(ad.constant([[0.0, 0.0]]))
        assert np.allclose(s.value, [[0.5, 0.5]])

    def test_matmul_identity(self):
        a = np.arange(8.0).reshape(2, 4)
        out = ad.matmul(ad.constant(np.eye(2)), ad.constant(a))
        assert np.array_equal(out.value, a)

    def test_tanh_zero(self):
        x = scalar(0.0)
        y = ad.tanh(x)
        (g,) = ad.grad(y, [x])
        assert y.value == 0.0
        assert g.value == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(ad.constant([[1.0]]), ad.constant([[1.0, 2.0]]))
        with pytest.raises(ShapeError):
            ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


class TestCrossEntropy:
    def test_perfect_prediction(self):
        loss = ad.cross_entropy(ad.constant([[1.0, 0.0]]), np.asarray([[1.0, 0.0]]))
        assert abs(loss.item()) <= 1e-12

    def test_coin_flip(self):
        loss = ad.cross_entropy(ad.constant([[0.5, 0.5]]), np.asarray([[0.0, 1.0]]))
        assert loss.item() == pytest.approx(np.log(2.0))

    def test_logit_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(0)
        logits = ad.leaf(rng.normal(size=(3, 4)), trainable=True)
        probs = ad.softmax_rows(logits)
        targets = np.eye(4)[[1, 0, 3]]
        loss = ad.cross_entropy(probs, targets)
        (g,) = ad.grad(loss, [logits])
        expected = (probs.value - targets) / 3.0
        assert max_rel_err(g.value, expected) < 1e-10

        def f(arr):
            return ad.cross_entropy(ad.softmax_rows(ad.constant(arr)), targets).item()

        fd = central_diff(f, logits.value)
        assert max_rel_err(g.value, fd) < 1e-4

    def test_invalid_distribution(self):
        with pytest.raises(InvalidDistribution):
            ad.cross_entropy(ad.constant([[0.9, 0.3]]), np.asarray([[1.0, 0.0]]))
        with pytest.raises(InvalidDistribution):
            ad.cross_entropy(ad.constant([[0.5, 0.5]]), np.asarray([[1.0, 1.0]]))

    def test_clamp_keeps_zero_probability_finite(self):
        loss = ad.cross_entropy(ad.constant([[0.0, 1.0]]), np.asarray([[1.0, 0.0]]))
        assert np.isfinite(loss.item())
        assert loss.item() == pytest.approx(-np.log(ad.PROB_CLAMP))


def test_every_primitive_matches_finite_differences():
    """A handful of seeded sweeps here; the full 100-trial sweep runs in the
    acceptance suite."""
    for trial in range(5):
        check_primitives_against_fd(1000 + trial)


def test_grad_of_grad_matches_finite_differences_of_first_gradient():
    rng = np.random.default_rng(5)
    for trial in range(10):
        w = rng.normal(size=(3, 3))
        v = rng.normal(size=(1, 3))
        probe = rng.normal(size=(3, 3))

        def first_grad(arr):
            wn = ad.leaf(arr, trainable=True)
            h = ad.tanh(ad.matmul(ad.constant(v), wn))
            loss = ad.sum_all(ad.mul(h, h))
            (g,) = ad.grad(loss, [wn], create_graph=True)
            return g, wn

        g, wn = first_grad(w)
        probed = ad.sum_all(ad.mul(g, ad.constant(probe)))
        (gg,) = ad.grad(probed, [wn])

        def f(arr):
            return float((first_grad(arr)[0].value * probe).sum())

        fd = central_diff(f, w, step=1e-5)
        assert max_rel_err(gg.value, fd) < 1e-3


@settings(max_examples=30, deadline=None)
@given(
    st.floats(-3, 3),
    st.floats(-3, 3),
    st.integers(0, 2**31 - 1),
)
def test_linearity_of_grad(a, b, seed):
    rng = np.random.default_rng(seed)
    x = ad.leaf(rng.normal(size=(2, 3)), trainable=True)
    f = ad.sum_all(ad.tanh(x))
    g = ad.sum_all(ad.mul(x, x))
    combined = ad.add(ad.scalar_mul(a, f), ad.scalar_mul(b, g))
    (gc,) = ad.grad(combined, [x])
    (gf,) = ad.grad(f, [x])
    (gg,) = ad.grad(g, [x])
    assert np.max(np.abs(gc.value - (a * gf.value + b * gg.value))) < 1e-10


def test_unreachable_leaf_gets_zero_tensor():
    x = ad.leaf(np.ones((2, 2)), trainable=True)
    y = ad.leaf(np.ones((3, 1)), trainable=True)
    loss = ad.sum_all(ad.mul(x, x))
    gx, gy = ad.grad(loss, [x, y])
    assert np.array_equal(gy.value, np.zeros((3, 1)))
    assert gx.value.shape == (2, 2)


def test_values_stay_finite_and_unmutated():
    rng = np.random.default_rng(8)
    x = ad.leaf(rng.normal(size=(4, 4)), trainable=True)
    before = x.value.copy()
    loss = ad.mean(ad.tanh(ad.matmul(x, x)))
    ad.grad(loss, [x], create_graph=True)
    assert np.array_equal(x.value, before)
    assert np.isfinite(loss.item())


def test_detached_gradients_do_not_require_grad():
    x = scalar(2.0)
    (g,) = ad.grad(ad.mul(x, x), [x], create_graph=False)
    assert not g.requires_grad
    (g2,) = ad.grad(ad.mul(x, x), [x], create_graph=True)
    assert g2.requires_grad
