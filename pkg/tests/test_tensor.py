import math

import numpy as np
import pytest

from project.errors import ShapeError, VocabularyError
from project.tensor import (
    IGNORE_INDEX,
    Tape,
    Tensor,
    add,
    columns,
    concat_columns,
    cross_entropy,
    dropout,
    embedding_lookup,
    fd_gradient,
    matmul,
    mul_elem,
    reshape,
    rms_norm,
    scale,
    set_rows,
    silu,
    softmax_rows,
    sub,
    sum_all,
    take_rows,
    transpose,
)


def check_gradient(build, value, rtol=1e-6, atol=1e-9):
    """Compares the tape gradient of a scalar-valued build(x) with central differences."""
    tape = Tape()
    x = tape.watch(value)
    analytic = tape.backward(build(x))[x]
    numeric = fd_gradient(lambda shifted: build(Tensor(shifted)).item(), value)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def test_matmul_worked_example():
    tape = Tape()
    x = tape.watch([[1.0, 2.0]])
    loss = sum_all(matmul(x, Tensor([[3.0], [4.0]])))
    assert loss.item() == 11.0
    np.testing.assert_array_equal(tape.backward(loss)[x], [[3.0, 4.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_untracked_inputs_record_nothing():
    tape = Tape()
    out = add(Tensor([1.0]), Tensor([2.0]))
    assert not out.tracked
    assert len(tape) == 0


def test_operands_on_different_tapes_are_rejected():
    a = Tape().watch([1.0])
    b = Tape().watch([1.0])
    with pytest.raises(ValueError):
        add(a, b)


def test_backward_needs_scalar_loss():
    tape = Tape()
    x = tape.watch([1.0, 2.0])
    with pytest.raises(ShapeError):
        tape.backward(scale(x, 2.0))


def test_unreached_leaf_has_no_gradient():
    tape = Tape()
    x = tape.watch([1.0, 2.0])
    y = tape.watch([3.0])
    grads = tape.backward(sum_all(x))
    assert y not in grads
    with pytest.raises(KeyError):
        grads[y]
    np.testing.assert_array_equal(grads.get(y, zeros=True), [0.0])


def test_shared_input_accumulates_gradient():
    tape = Tape()
    x = tape.watch([2.0, -1.0])
    grads = tape.backward(sum_all(mul_elem(x, x)))
    np.testing.assert_array_equal(grads[x], [4.0, -2.0])


def test_operator_sugar_matches_functions(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal((a + b).data, add(a, b).data)
    np.testing.assert_array_equal((a - b).data, sub(a, b).data)
    np.testing.assert_array_equal((a * 2.0).data, scale(a, 2.0).data)
    np.testing.assert_array_equal((a * b).data, mul_elem(a, b).data)
    np.testing.assert_array_equal((a @ b.T).data, matmul(a, transpose(b)).data)


@pytest.mark.parametrize(
    "build",
    [
        lambda x: sum_all(mul_elem(silu(x), x)),
        lambda x: sum_all(mul_elem(softmax_rows(x), Tensor(np.arange(12.0).reshape(3, 4)))),
        lambda x: sum_all(mul_elem(rms_norm(x, Tensor([0.5, 1.0, 2.0, -1.0]), 1e-6), x)),
        lambda x: sum_all(mul_elem(take_rows(x, [2, 0, 2]), Tensor(np.ones((3, 4))))),
        lambda x: sum_all(mul_elem(set_rows(x, [1], scale(take_rows(x, [0]), 3.0)), x)),
        lambda x: sum_all(mul_elem(concat_columns([columns(x, 0, 1), columns(x, 1, 4)]), x)),
        lambda x: sum_all(mul_elem(reshape(x, (4, 3)), Tensor(np.arange(12.0).reshape(4, 3)))),
        lambda x: sum_all(mul_elem(add(x, Tensor([1.0, 2.0, 3.0, 4.0])), x)),
        lambda x: cross_entropy(x, [1, IGNORE_INDEX, 3]),
        lambda x: cross_entropy(x, [0, 2, 3], reduction="sum"),
    ],
)
def test_primitive_gradients_match_finite_differences(build, rng):
    check_gradient(build, rng.normal(size=(3, 4)))


def test_rms_norm_gain_gradient(rng):
    x = Tensor(rng.normal(size=(3, 5)))
    weight = Tensor(rng.normal(size=(3, 5)))
    check_gradient(lambda g: sum_all(mul_elem(rms_norm(x, g, 1e-6), weight)), rng.normal(size=5))


def test_broadcast_add_gradient(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    weight = Tensor(rng.normal(size=(3, 4)))
    check_gradient(lambda b: sum_all(mul_elem(sub(x, b), weight)), rng.normal(size=4))


def test_embedding_lookup_gradient_scatters_rows(rng):
    check_gradient(
        lambda t: sum_all(mul_elem(embedding_lookup(t, [1, 1, 3]), Tensor(np.arange(6.0).reshape(3, 2)))),
        rng.normal(size=(4, 2)),
    )


def test_embedding_lookup_rejects_out_of_vocabulary_id():
    with pytest.raises(VocabularyError):
        embedding_lookup(Tensor(np.zeros((4, 2))), [0, 4])


def test_cross_entropy_of_uniform_logits_is_log_vocab():
    loss = cross_entropy(Tensor(np.zeros((5, 64))), [3, 1, 4, 1, 5])
    assert loss.item() == pytest.approx(math.log(64), abs=1e-12)


def test_cross_entropy_of_dominant_logit_vanishes():
    logits = np.zeros((1, 10))
    logits[0, 7] = 50.0
    assert cross_entropy(Tensor(logits), [7]).item() < 1e-20


def test_cross_entropy_needs_a_supervised_row():
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((2, 3))), [IGNORE_INDEX, IGNORE_INDEX])


def test_cross_entropy_is_stable_for_huge_logits():
    logits = np.array([[1000.0, 0.0, -1000.0]])
    assert np.isfinite(cross_entropy(Tensor(logits), [2]).item())


def test_dropout_zero_probability_is_identity(rng):
    x = Tensor(rng.normal(size=(2, 3)))
    assert dropout(x, 0.0, rng) is x


def test_dropout_scales_kept_entries(rng):
    out = dropout(Tensor(np.ones((50, 50))), 0.5, rng)
    assert set(np.unique(out.data)) <= {0.0, 2.0}


def test_set_rows_rejects_repeated_positions():
    with pytest.raises(ShapeError):
        set_rows(Tensor(np.zeros((3, 2))), [1, 1], Tensor(np.zeros((2, 2))))


def test_fd_gradient_leaves_input_untouched():
    x = np.array([1.0, 2.0])
    grad = fd_gradient(lambda v: float(np.sum(v**2)), x)
    np.testing.assert_allclose(grad, [2.0, 4.0], rtol=1e-8)
    np.testing.assert_array_equal(x, [1.0, 2.0])
