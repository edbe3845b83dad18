import numpy as np
import pytest

from cause import tensor as T
from cause.tensor import Tensor, finite_diff_check


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_matmul_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)


def test_softmax_equal_logits_is_uniform():
    out = T.softmax(Tensor(np.full((2, 7), 3.3))).data
    np.testing.assert_allclose(out, 1 / 7, rtol=0, atol=1e-15)


def test_row_mean():
    np.testing.assert_array_equal(T.mean(Tensor([[1.0, 0.0], [0.0, 1.0]]), axis=0).data, [0.5, 0.5])


def test_product_rule():
    x, y = Tensor(2.0, requires_grad=True), Tensor(3.0, requires_grad=True)
    T.backward(x * y)
    assert x.grad == 3.0 and y.grad == 2.0


def test_gather_fan_out_accumulates():
    E = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    T.backward(T.sum_(T.gather(E, [0, 0])))
    np.testing.assert_array_equal(E.grad, [[2, 2], [0, 0], [0, 0]])


def test_untracked_leaf_untouched():
    a, b = Tensor([1.0, 2.0], requires_grad=True), Tensor([3.0, 4.0])
    T.backward(T.sum_(a * b))
    assert b.grad is None
    np.testing.assert_array_equal(a.grad, [3.0, 4.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(T.ShapeError):
        T.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_shape_errors_name_the_op():
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(T.ShapeError, match="add"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_fully_masked_softmax_row_is_zero():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
    mask = np.array([[1, 1, 0, 0], [0, 0, 0, 0], [1, 1, 1, 1]], dtype=bool)
    out = T.softmax(x, mask=mask)
    np.testing.assert_array_equal(out.data[1], 0.0)
    np.testing.assert_array_equal(out.data[0, 2:], 0.0)
    np.testing.assert_allclose(out.data[[0, 2]].sum(1), 1.0, atol=1e-9)
    T.backward(T.sum_(T.mul(out, Tensor(np.arange(12.0).reshape(3, 4)))))
    assert np.all(np.isfinite(x.grad))
    np.testing.assert_array_equal(x.grad[1], 0.0)


def test_checked_mode_rejects_nan():
    with T.checked():
        with pytest.raises(ValueError):
            Tensor([1.0, np.nan])
    Tensor([1.0, np.nan])  # unchecked outside the context


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        out = a * 2.0
    assert not out.requires_grad and out._parents == ()


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    W = rand(rng, 4, 4)
    x = Tensor(rng.normal(size=(5, 4)))
    grads = []
    for _ in range(2):
        W.grad = None
        T.backward(T.sum_(T.gelu(T.matmul(x, W))))
        grads.append(W.grad.copy())
    np.testing.assert_array_equal(*grads)


# ---------------------------------------------------------------- gradient checks per op

def _ops(rng):
    a = rand(rng, 3, 4)
    b = rand(rng, 3, 4)
    row = rand(rng, 4)
    m = rand(rng, 4, 5)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    bat = rand(rng, 2, 3, 4)
    table = rand(rng, 5, 4)
    g, bt = rand(rng, 4), rand(rng, 4)
    mask = np.tril(np.ones((3, 4), dtype=bool))
    w = Tensor(rng.normal(size=(3, 4)))
    w2 = Tensor(rng.normal(size=(2, 3, 4)))
    q, k, v = rand(rng, 2, 3, 4), rand(rng, 2, 3, 4), rand(rng, 2, 3, 4)
    cm = T.causal_mask(3)
    return {
        "add": (lambda: T.sum_(T.mul(T.add(a, b), w)), [a, b]),
        "add_row_bias": (lambda: T.sum_(T.mul(T.add(a, row), w)), [a, row]),
        "sub": (lambda: T.sum_(T.mul(T.sub(a, b), w)), [a, b]),
        "mul": (lambda: T.sum_(T.mul(a, b)), [a, b]),
        "scale": (lambda: T.sum_(T.mul(T.scale(a, -2.5), w)), [a]),
        "matmul": (lambda: T.sum_(T.gelu(T.matmul(a, m))), [a, m]),
        "matmul_batched": (lambda: T.sum_(T.gelu(T.matmul(bat, m))), [bat, m]),
        "row_mean": (lambda: T.sum_(T.mul(T.mean(bat, axis=1), Tensor(np.arange(8.0).reshape(2, 4)))), [bat]),
        "concat": (lambda: T.sum_(T.mul(T.concat([a, b], axis=1), Tensor(np.arange(24.0).reshape(3, 8)))), [a, b]),
        "slice": (lambda: T.sum_(T.mul(a[1:, ::2], Tensor(np.ones((2, 2)) * 3))), [a]),
        "slice_fancy": (lambda: T.sum_(T.mul(a[np.array([[0], [2]]), np.array([[1, 1, 3]])],
                                             Tensor(np.arange(6.0).reshape(2, 3)))), [a]),
        "gather": (lambda: T.sum_(T.mul(T.gather(table, [[0, 3], [3, 1]]), w2[:, :2, :])), [table]),
        "softmax": (lambda: T.sum_(T.mul(T.softmax(a), w)), [a]),
        "softmax_masked": (lambda: T.sum_(T.mul(T.softmax(a, mask=mask), w)), [a]),
        "log_softmax": (lambda: T.sum_(T.mul(T.log_softmax(a), w)), [a]),
        "log": (lambda: T.sum_(T.mul(T.log(pos), w)), [pos]),
        "exp": (lambda: T.sum_(T.mul(T.exp(a), w)), [a]),
        "gelu": (lambda: T.sum_(T.mul(T.gelu(a), w)), [a]),
        "layer_norm": (lambda: T.sum_(T.mul(T.layer_norm(bat, g, bt), w2)), [bat, g, bt]),
        "reshape_transpose": (lambda: T.sum_(T.mul(T.transpose(T.reshape(a, (2, 6)), (1, 0)),
                                                   Tensor(np.arange(12.0).reshape(6, 2)))), [a]),
        "attention": (lambda: T.sum_(T.mul(T.scaled_dot_attention(q, k, v, cm), w2)), [q, k, v]),
    }


OP_NAMES = list(_ops(np.random.default_rng(0)))


@pytest.mark.parametrize("name", OP_NAMES)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_op_gradient_matches_finite_differences(name, seed):
    f, xs = _ops(np.random.default_rng(seed))[name]
    assert finite_diff_check(f, xs) < 1e-4


def test_finite_diff_quadratic():
    x = Tensor(np.random.default_rng(5).normal(size=10))
    assert finite_diff_check(lambda: T.sum_(T.mul(x, x)), x) < 1e-6


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(9)
    out = T.softmax(Tensor(rng.normal(scale=5, size=(50, 13)))).data
    np.testing.assert_allclose(out.sum(1), 1.0, rtol=0, atol=1e-9)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b.bias": rng.normal(size=7).astype(np.float32),
              "c": np.float32(rng.normal(size=(2, 2, 2)))}
    T.save_tensors(tmp_path / "ck", arrays)
    back = T.load_tensors(tmp_path / "ck")
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()
    raw = (tmp_path / "ck.bin").read_bytes()
    assert len(raw) == 4 * (12 + 7 + 8)
    T.save_tensors(tmp_path / "ck2", back)
    assert (tmp_path / "ck2.bin").read_bytes() == raw
