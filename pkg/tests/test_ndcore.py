import math

import numpy as np
import pytest

from tokenstyle.errors import DimensionError, NumericError
from tokenstyle.ndcore import (AdamState, Tensor, adam_step, grad_check, grad_check_many,
                               ops, precision)
from tokenstyle.ndcore.tensor import make_result


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


class TestForward:
    def test_matmul_scalar(self):
        out = ops.matmul(Tensor([[2.0]]), Tensor([[3.0]]))
        assert out.data.tolist() == [[6.0]]

    def test_matmul_shape_error_names_op(self):
        with pytest.raises(DimensionError, match="matmul"):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_layer_norm_constant_is_zero(self):
        out = ops.layer_norm(Tensor(np.full((1, 6), 3.7)))
        assert np.all(out.data == 0.0)

    def test_embedding_gradient_only_selected_row(self):
        table = Tensor(np.random.default_rng(0).normal(size=(5, 3)), requires_grad=True)
        ops.sum(ops.embedding_lookup(table, np.array([0]))).backward()
        assert np.all(table.grad[0] != 0)
        assert np.all(table.grad[1:] == 0)

    def test_softmax_examples(self):
        assert np.allclose(ops.softmax(t64([0.0, 0.0])).data, [0.5, 0.5], atol=0)
        out = ops.softmax(t64([math.log(1), math.log(3)])).data
        assert np.allclose(out, [0.25, 0.75], atol=1e-15)
        rnd = ops.softmax(Tensor(np.random.default_rng(3).normal(size=5))).data
        assert abs(rnd.sum() - 1.0) < 1e-6 and np.all(rnd > 0)

    def test_softmax_rejects_nonfinite(self):
        with pytest.raises(NumericError):
            ops.softmax(Tensor([0.0, np.nan]))
        with pytest.raises(NumericError):
            ops.softmax(Tensor([0.0, np.inf]))

    def test_softmax_mask_gives_exact_zero(self):
        mask = np.eye(3, dtype=bool)
        p = ops.softmax(Tensor(np.random.default_rng(1).normal(size=(3, 3))), mask=mask).data
        assert np.all(np.diag(p) == 0.0)
        assert np.allclose(p.sum(-1), 1.0, atol=1e-6)

    def test_cross_entropy_examples(self):
        assert math.isclose(ops.cross_entropy(t64(np.zeros(4)), 2).item(), math.log(4), rel_tol=1e-12)
        assert ops.cross_entropy(t64([1000.0, 0.0]), 0).item() == 0.0
        logits = t64(np.log([[0.25, 0.75], [0.5, 0.5]]))
        assert math.isclose(ops.cross_entropy(logits, np.array([0, 1])).item(), 2.0794415416798357,
                            rel_tol=1e-12)

    def test_cross_entropy_gradient_is_p_minus_onehot(self):
        logits = t64([0.3, -1.2, 2.0])
        ops.cross_entropy(logits, 1).backward()
        p = np.exp(logits.data) / np.exp(logits.data).sum()
        assert np.allclose(logits.grad, p - np.array([0, 1, 0]), atol=1e-14)

    def test_cross_entropy_target_out_of_range(self):
        with pytest.raises(IndexError):
            ops.cross_entropy(t64(np.zeros(4)), 4)

    def test_fanout_accumulates(self):
        x = t64([1.5])
        ops.sum(x + x).backward()
        assert x.grad.tolist() == [2.0]

    def test_conv2d_matches_direct_sum(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 4, 5, 2))
        w = rng.normal(size=(3, 3, 2, 3))
        out = ops.conv2d(t64(x), t64(w)).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        ref = np.zeros((1, 4, 5, 3))
        for i in range(4):
            for j in range(5):
                ref[0, i, j] = np.einsum("abc,abcd->d", xp[0, i:i + 3, j:j + 3], w)
        assert np.allclose(out, ref, atol=1e-12)

    def test_space_depth_roundtrip(self):
        x = Tensor(np.arange(2 * 4 * 4 * 3, dtype=np.float64).reshape(2, 4, 4, 3))
        assert np.array_equal(ops.depth_to_space(ops.space_to_depth(x)).data, x.data)

    def test_forward_backward_bit_identical(self):
        def run():
            rng = np.random.default_rng(7)
            w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            x = Tensor(rng.normal(size=(2, 4)))
            loss = ops.cross_entropy(ops.gelu(ops.matmul(x, w)), np.array([0, 2]))
            loss.backward()
            return loss.data.tobytes() + w.grad.tobytes()
        assert run() == run()


class TestAdam:
    def test_first_step_bias_corrected(self):
        p = np.array([0.0])
        adam_step([p], [np.array([1.0])], AdamState.zeros_like([p]), lr=0.1)
        assert math.isclose(p[0], -0.1, rel_tol=1e-6)

    def test_zero_gradient_leaves_params(self):
        p = np.array([1.0, -2.0])
        state = AdamState.zeros_like([p])
        for _ in range(3):
            adam_step([p], [np.zeros(2)], state, lr=0.1)
        assert p.tolist() == [1.0, -2.0] and state.t == 3

    def test_constant_gradient_monotone(self):
        # with constant g the bias-corrected ratio is exactly 1 each step
        p = np.array([0.0])
        state = AdamState.zeros_like([p])
        seen = []
        for _ in range(2):
            adam_step([p], [np.array([0.5])], state, lr=0.01)
            seen.append(p[0])
        assert seen[0] < 0 and seen[1] < seen[0]
        assert math.isclose(seen[1], -0.02, rel_tol=1e-6)

    def test_shape_mismatch(self):
        p = np.zeros(2)
        with pytest.raises(DimensionError):
            adam_step([p], [np.zeros(3)], AdamState.zeros_like([p]), lr=0.1)


class TestGradCheck:
    def test_quadratic(self):
        err = grad_check(lambda x: ops.sum(ops.square(x)), t64([1.0, 2.0]))
        assert err < 1e-6

    def test_detects_corrupted_backward(self):
        def bad_square(x):
            return make_result(x.data ** 2, (x,), lambda g: (3.0 * g * x.data,), "bad")
        err = grad_check(lambda x: ops.sum(bad_square(x)), t64([0.7, -1.3]))
        assert err > 1e-2

    @pytest.mark.filterwarnings("ignore:invalid value encountered in log:RuntimeWarning")
    def test_nonfinite_objective(self):
        with pytest.raises(NumericError):
            grad_check(lambda x: ops.sum(ops.log(x)), t64([-1.0]))

    def test_requires_float64(self):
        with pytest.raises(TypeError):
            grad_check(lambda x: ops.sum(x), Tensor([1.0]))


def _case(name, rng):
    """Inputs and a scalar objective (random projection of the op output)."""
    r = lambda *s: t64(rng.normal(size=s))  # noqa: E731
    if name == "matmul":
        ins = [r(2, 3, 4), r(4, 5)]
        fn = ops.matmul
    elif name == "batched_matmul":
        ins = [r(2, 3, 4), r(2, 4, 3)]
        fn = ops.matmul
    elif name == "add_broadcast":
        ins = [r(3, 4), r(4)]
        fn = ops.add
    elif name == "mul_div":
        ins = [r(3, 4), t64(rng.uniform(0.5, 2.0, size=(3, 4)))]
        fn = lambda a, b: ops.div(ops.mul(a, b), ops.add(b, 1.0))  # noqa: E731
    elif name == "layer_norm":
        ins = [r(3, 5), r(5), r(5)]
        fn = ops.layer_norm
    elif name == "gelu":
        ins = [r(4, 3)]
        fn = ops.gelu
    elif name == "relu":
        ins = [t64(rng.uniform(0.1, 1.0, size=(4, 3)) * rng.choice([-1, 1], size=(4, 3)))]
        fn = ops.relu
    elif name == "softmax":
        mask = np.eye(3, 4, dtype=bool)
        ins = [r(3, 4)]
        fn = lambda x: ops.softmax(x, axis=-1, mask=mask)  # noqa: E731
    elif name == "log_softmax_pick":
        idx = rng.integers(0, 4, size=3)
        ins = [r(3, 4)]
        fn = lambda x: ops.pick(ops.log_softmax(x), idx)  # noqa: E731
    elif name == "cross_entropy":
        idx = rng.integers(0, 6, size=3)
        ins = [r(3, 6)]
        fn = lambda x: ops.cross_entropy(x, idx)  # noqa: E731
    elif name == "embedding_lookup":
        idx = rng.integers(0, 5, size=(2, 4))
        ins = [r(5, 3)]
        fn = lambda t: ops.embedding_lookup(t, idx)  # noqa: E731
    elif name == "reshape_transpose_concat":
        ins = [r(2, 3, 2), r(2, 1, 2)]
        fn = lambda a, b: ops.reshape(  # noqa: E731
            ops.transpose(ops.concat([a, b], axis=1), (2, 0, 1)), (2, 8))
    elif name == "space_depth":
        ins = [r(1, 4, 4, 2)]
        fn = lambda x: ops.depth_to_space(ops.space_to_depth(x), 2)  # noqa: E731
    elif name == "conv2d":
        ins = [r(1, 4, 3, 2), r(3, 3, 2, 2), r(2)]
        fn = ops.conv2d
    elif name == "l2_normalize":
        ins = [r(3, 4)]
        fn = ops.l2_normalize
    elif name == "exp_log_sqrt":
        ins = [t64(rng.uniform(0.5, 2.0, size=(3,)))]
        fn = lambda x: ops.add(ops.log(ops.exp(ops.mul(x, 0.5))), ops.sqrt(x))  # noqa: E731
    elif name == "mean_take_rows":
        ins = [r(4, 3)]
        fn = lambda x: ops.mean(ops.square(ops.take_rows(x, np.array([0, 2, 2]))), axis=0)  # noqa: E731
    elif name == "sigmoid":
        ins = [r(5)]
        fn = ops.sigmoid
    else:
        raise KeyError(name)
    with np.errstate(all="ignore"):
        shape = fn(*ins).shape
    proj = rng.normal(size=shape)
    return ins, lambda: ops.sum(ops.mul(fn(*ins), proj))


OPS = ["matmul", "batched_matmul", "add_broadcast", "mul_div", "layer_norm", "gelu", "relu",
       "softmax", "log_softmax_pick", "cross_entropy", "embedding_lookup",
       "reshape_transpose_concat", "space_depth", "conv2d", "l2_normalize", "exp_log_sqrt",
       "mean_take_rows", "sigmoid"]


@pytest.mark.parametrize("name", OPS)
def test_every_op_passes_gradcheck_over_seeds(name):
    with precision(np.float64):
        for seed in range(20):
            tensors, f = _case(name, np.random.default_rng(seed))
            assert grad_check_many(f, tensors) < 1e-4, (name, seed)
