"""Numeric core: op semantics, gradients against central differences, tape rules."""

import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nanomt import autodiff as ad
from nanomt.autodiff import Tape, Tensor, grad_check
from nanomt.errors import ContractError, DimensionError


@pytest.fixture(autouse=True)
def finite_checks():
    ad.set_debug_checks(True)
    yield
    ad.set_debug_checks(False)


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    m = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(ad.matmul(eye, m).data, m.data)


def test_matmul_hand_expansion():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(ad.matmul(a, b).data,
                          np.array([[19.0, 22.0], [43.0, 50.0]]))


def test_matmul_zero_annihilator():
    a = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    zero = Tensor(np.zeros((4, 2)))
    assert np.array_equal(ad.matmul(a, zero).data, np.zeros((3, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_layer_norm_constant_vector_is_zero():
    x = Tensor(np.full(6, 3.7))
    out = ad.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)), 1e-6)
    assert np.allclose(out.data, 0.0)


def test_layer_norm_two_point_example():
    out = ad.layer_norm(Tensor(np.array([1.0, 3.0])), Tensor(np.ones(2)),
                        Tensor(np.zeros(2)), 1e-6)
    # mean 2, variance 1; eps pulls the magnitude just under 1
    assert np.allclose(out.data, [-0.9999995000003749, 0.9999995000003749],
                       atol=1e-12)


def test_layer_norm_normalizes():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(2.0, 3.0, size=(5, 16)))
    out = ad.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), 1e-6)
    assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(out.data.var(axis=-1), 1.0, atol=1e-5)


def test_relu_cases():
    out = ad.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_relu_gradient_zero_at_zero_and_negatives():
    x = Tensor(np.array([-2.0, 0.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        y = ad.sum_all(ad.relu(x))
        tape.backward(y)
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_relu_all_positive_is_identity():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = ad.relu(x)
        tape.backward(ad.sum_all(y))
    assert np.array_equal(y.data, x.data)
    assert np.array_equal(x.grad, [1.0, 1.0])


def test_softmax_symmetry():
    assert np.array_equal(ad.softmax(Tensor(np.zeros(2))).data, [0.5, 0.5])


def test_softmax_large_logits_stable():
    out = ad.softmax(Tensor(np.array([1000.0, 1000.0])))
    assert np.array_equal(out.data, [0.5, 0.5])


def test_softmax_quarter_three_quarters():
    out = ad.softmax(Tensor(np.array([0.0, math.log(3.0)])))
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_sums_to_one(values):
    out = ad.softmax(Tensor(np.array(values)))
    assert abs(out.data.sum() - 1.0) <= 1e-12


def test_softmax_shift_invariance_bitwise_for_integer_logits():
    x = np.array([3.0, -2.0, 7.0, 0.0])
    a = ad.softmax(Tensor(x)).data
    b = ad.softmax(Tensor(x + 11.0)).data
    assert a.tobytes() == b.tobytes()


def test_softmax_shift_invariance_tolerance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=9)
    a = ad.softmax(Tensor(x)).data
    b = ad.softmax(Tensor(x + math.pi)).data
    assert np.allclose(a, b, atol=1e-12)


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((3, 4)))
    loss = ad.cross_entropy(logits, np.array([0, 1, 3]), pad_id=-1)
    assert np.isclose(float(loss.data), math.log(4.0), atol=1e-12)


def test_cross_entropy_confident_correct():
    logits = np.full((2, 5), -100.0)
    logits[0, 2] = 100.0
    logits[1, 4] = 100.0
    loss = ad.cross_entropy(Tensor(logits), np.array([2, 4]), pad_id=0)
    assert float(loss.data) < 1e-12


def test_cross_entropy_all_pad_is_zero_with_zero_grad():
    logits = Tensor(np.random.default_rng(0).normal(size=(2, 4)),
                    requires_grad=True)
    with Tape() as tape:
        loss = ad.cross_entropy(logits, np.array([0, 0]), pad_id=0)
        tape.backward(loss)
    assert float(loss.data) == 0.0
    assert logits.grad is None or not logits.grad.any()


def test_cross_entropy_out_of_range_target():
    with pytest.raises(ContractError, match="outside"):
        ad.cross_entropy(Tensor(np.zeros((1, 4))), np.array([9]), pad_id=0)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.relu(x)
        with pytest.raises(ContractError, match="scalar"):
            tape.backward(y)


def test_grad_check_sum_of_squares():
    x = Tensor(np.random.default_rng(1).normal(size=(4, 3)))
    err = grad_check(lambda t: ad.sum_all(ad.mul(t, t)), x, h=1e-5)
    assert err <= 1e-7


def test_grad_check_constant_function():
    x = Tensor(np.random.default_rng(2).normal(size=5))
    err = grad_check(lambda t: ad.sum_all(ad.mul(t, 0.0)), x, h=1e-5)
    assert err == 0.0


def _rng_tensor(rng, shape, margin=0.0):
    data = rng.normal(size=shape)
    if margin:
        data = np.where(np.abs(data) < margin, margin, data)
    return Tensor(data)


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_each_operation(seed):
    """Relative error <= 1e-4 for every differentiable op at random points."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(4, 5))
    gain = Tensor(rng.normal(1.0, 0.2, size=5))
    bias = Tensor(rng.normal(size=5))
    other = Tensor(rng.normal(size=(3, 5)))
    ids = rng.integers(0, 6, size=(2, 3))
    targets = rng.integers(0, 5, size=3)

    err = grad_check(
        lambda t: ad.sum_all(ad.mul(ad.matmul(t, w), other)),
        _rng_tensor(rng, (3, 4)), h=1e-5)
    assert err <= 1e-4, f"matmul: relative error {err}"

    cases = {
        "add": lambda t: ad.sum_all(ad.mul(ad.add(t, other), ad.add(t, other))),
        "sub": lambda t: ad.sum_all(ad.mul(ad.sub(t, other), other)),
        "mul": lambda t: ad.sum_all(ad.mul(ad.mul(t, other), other)),
        "relu": lambda t: ad.sum_all(ad.mul(ad.relu(t), other)),
        "softmax": lambda t: ad.sum_all(ad.mul(ad.softmax(t), other)),
        "layer_norm": lambda t: ad.sum_all(
            ad.mul(ad.layer_norm(t, gain, bias, 1e-6), other)),
        "reshape": lambda t: ad.sum_all(
            ad.mul(ad.reshape(t, (5, 3)), ad.reshape(other, (5, 3)))),
        "transpose": lambda t: ad.sum_all(
            ad.mul(ad.transpose(t, (1, 0)), ad.transpose(other, (1, 0)))),
        "cross_entropy": lambda t: ad.cross_entropy(t, targets, pad_id=-1),
    }
    for name, f in cases.items():
        x = _rng_tensor(rng, (3, 5), margin=1e-3 if name == "relu" else 0.0)
        err = grad_check(f, x, h=1e-5)
        assert err <= 1e-4, f"{name}: relative error {err}"

    # embedding gradient, checked through the table
    table = _rng_tensor(rng, (6, 4))
    lookup_mult = Tensor(rng.normal(size=(2, 3, 4)))
    err = grad_check(
        lambda t: ad.sum_all(ad.mul(ad.embedding(t, ids), lookup_mult)),
        table, h=1e-5)
    assert err <= 1e-4, f"embedding: relative error {err}"

    # layer_norm parameter gradients
    x_fixed = Tensor(rng.normal(size=(3, 5)))
    err = grad_check(
        lambda t: ad.sum_all(ad.mul(ad.layer_norm(x_fixed, t, bias, 1e-6),
                                    other)), gain, h=1e-5)
    assert err <= 1e-4, f"layer_norm gain: relative error {err}"


def test_gradient_accumulation_is_additive():
    x = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]), requires_grad=True)
    with Tape() as tape:
        y = ad.add(x, x)
        tape.backward(ad.sum_all(ad.mul(y, y)))
    split = x.grad.copy()
    x.zero_grad()
    with Tape() as tape:
        y = ad.mul(x, 2.0)
        tape.backward(ad.sum_all(ad.mul(y, y)))
    assert np.array_equal(split, x.grad)


def test_two_identical_tapes_bitwise_identical_gradients():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        with Tape() as tape:
            y = ad.softmax(ad.relu(ad.matmul(x, w)))
            tape.backward(ad.sum_all(ad.mul(y, y)))
        return x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_untaped_forward_records_nothing():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = ad.relu(x)
    assert y._node is False and y.grad is None


def test_frozen_parameters_get_no_gradient():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    frozen = Tensor(np.ones((2, 2)), requires_grad=False)
    with Tape() as tape:
        loss = ad.sum_all(ad.matmul(x, frozen))
        tape.backward(loss)
    assert x.grad is not None
    assert frozen.grad is None


def test_tapes_are_thread_independent():
    results = {}

    def worker(name, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
        with Tape() as tape:
            for _ in range(5):
                loss = ad.sum_all(ad.mul(x, x))
            tape.backward(loss)
        results[name] = x.grad.copy()

    threads = [threading.Thread(target=worker, args=(i, i)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(4):
        rng = np.random.default_rng(i)
        expected = 2.0 * rng.normal(size=(8, 8))
        assert np.allclose(results[i], expected)
