import math

import numpy as np
import pytest

from hypermoe import tensor as T
from hypermoe.errors import ContractError, DimensionError, TargetError
from hypermoe.tensor import Rng, Tape, Tensor, finite_diff_grad


def triple_loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = Tensor(np.eye(2)) @ a
        assert np.array_equal(out.data, a.data)

    def test_hand_example(self):
        out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
        assert out.data.tolist() == [[11.0]]

    def test_against_triple_loop_oracle(self):
        rng = Rng(7)
        a, b = rng.gaussian(3, 4), rng.gaussian(4, 2)
        out = Tensor(a) @ Tensor(b)
        assert np.max(np.abs(out.data - triple_loop_matmul(a, b))) < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))

    def test_backward_rule(self):
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        b = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        T.tsum(a @ b).backward()
        g = np.ones((2, 4))
        assert np.allclose(a.grad, g @ b.data.T)
        assert np.allclose(b.grad, a.data.T @ g)


class TestElementwise:
    def test_relu(self):
        out = T.elementwise("relu", Tensor([-1.0, 0.0, 2.0]))
        assert out.data.tolist() == [0.0, 0.0, 2.0]

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor([0.0, -1.0, 3.0], requires_grad=True)
        T.tsum(T.relu(x)).backward()
        assert x.grad.tolist() == [0.0, 0.0, 1.0]

    def test_softplus_at_zero(self):
        out = T.elementwise("softplus", Tensor([0.0]))
        assert abs(out.data[0] - math.log(2.0)) < 1e-9

    def test_softplus_stable_at_large_inputs(self):
        out = T.softplus(Tensor([1000.0, -1000.0]))
        assert np.all(np.isfinite(out.data))
        assert abs(out.data[0] - 1000.0) < 1e-9

    def test_add(self):
        out = T.elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert out.data.tolist() == [4.0, 6.0]

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_mul_broadcast_column(self):
        a = Tensor(np.ones((3, 2)), requires_grad=True)
        s = Tensor(np.array([[2.0], [3.0], [4.0]]), requires_grad=True)
        T.tsum(a * s).backward()
        assert np.allclose(s.grad, [[2.0], [2.0], [2.0]])


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([[0.0, 0.0]]))
        assert np.allclose(out.data, [[0.5, 0.5]])

    def test_hand_computed(self):
        out = T.softmax(Tensor([[0.1, 0.7, 0.2]]))
        assert np.allclose(out.data, [[0.25463, 0.46396, 0.28141]], atol=1e-4)

    def test_no_overflow(self):
        out = T.softmax(Tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] > 0.999

    def test_rows_sum_to_one(self):
        rng = Rng(3)
        out = T.softmax(Tensor(rng.gaussian(50, 7) * 100))
        assert np.max(np.abs(out.data.sum(axis=-1) - 1.0)) < 1e-12

    def test_empty_axis_rejected(self):
        with pytest.raises(DimensionError):
            T.softmax(Tensor(np.zeros((2, 0))))


class TestReductionsLosses:
    def test_mse_zero(self):
        assert T.reductions_and_losses("mse", Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0

    def test_mean(self):
        assert T.reductions_and_losses("mean", Tensor([2.0, 4.0])).item() == 3.0

    def test_cross_entropy_uniform(self):
        loss = T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), np.array([0]))
        assert abs(loss.item() - math.log(2.0)) < 1e-12

    def test_cross_entropy_target_out_of_range(self):
        with pytest.raises(TargetError):
            T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), np.array([2]))


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.tsum(x).backward()
        assert x.grad.tolist() == [1.0, 1.0, 1.0]

    def test_hand_chain_rule(self):
        # loss = mse(w*x, y) at w=1, x=2, y=0 -> dL/dw = 2*(2)*2 = 8
        w = Tensor([1.0], requires_grad=True)
        loss = T.mse(w * Tensor([2.0]), Tensor([0.0]))
        loss.backward()
        assert np.allclose(w.grad, [8.0])

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            T.backward(Tensor([1.0, 2.0]))

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.tsum(x)
        loss.backward()
        loss.grad = None
        loss.backward()
        assert x.grad.tolist() == [2.0, 2.0]

    def test_composite_matches_finite_differences(self):
        rng = Rng(11)
        c = Tensor(rng.gaussian(2, 3))
        w = Tensor(rng.gaussian(3, 3), requires_grad=True)

        def f(wt):
            return T.tmean(T.softmax(T.relu(c @ wt)) * c)

        with Tape():
            f(w).backward()
        fd = finite_diff_grad(f, w)
        assert np.max(np.abs(w.grad - fd)) / max(np.max(np.abs(fd)), 1e-8) < 1e-4


# one graph family per op mix; 100 seeds total, vs the central-difference oracle
GRAPHS = {
    "mlp": lambda x, c: T.tmean(T.relu(x @ c) @ T.transpose_last2(c)),
    "softmax_mix": lambda x, c: T.tmean(T.softmax(x @ c) * (x @ c)),
    "softplus_sum": lambda x, c: T.tsum(T.softplus(x * Tensor(c.data[:, :1].T)) @ c),
    "norm_like": lambda x, c: T.tmean(T.layer_norm(x @ c, Tensor(np.ones(c.shape[1])), Tensor(np.zeros(c.shape[1])))),
}


@pytest.mark.parametrize("name", sorted(GRAPHS))
@pytest.mark.parametrize("seed", range(25))
def test_gradients_match_finite_differences(name, seed):
    rng = Rng(seed * 41 + 5)
    x = Tensor(rng.uniform(2, 3, low=-1.0, high=1.0), requires_grad=True)
    c = Tensor(rng.uniform(3, 4, low=-1.0, high=1.0))
    f = GRAPHS[name]
    with Tape():
        f(x, c).backward()
    fd = finite_diff_grad(lambda t: f(t, c), Tensor(x.data))
    assert np.max(np.abs(x.grad - fd)) / max(np.max(np.abs(fd)), 1e-6) < 1e-4


class TestFiniteDiff:
    def test_sum_of_squares(self):
        fd = finite_diff_grad(lambda t: T.tsum(t * t), Tensor([1.0, 2.0]))
        assert np.allclose(fd, [2.0, 4.0], atol=1e-6)

    def test_softmax_index_zero(self):
        fd = finite_diff_grad(lambda t: float(T.softmax(t).data[0]), Tensor([0.0, 0.0]))
        assert np.allclose(fd, [0.25, -0.25], atol=1e-6)

    def test_constant_function(self):
        fd = finite_diff_grad(lambda t: 1.5, Tensor([1.0, 2.0, 3.0]))
        assert np.all(fd == 0.0)

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda t: 0.0, Tensor([1.0]), step=0.0)


class TestGatherScatter:
    def test_gather_rows_backward(self):
        table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        T.tsum(T.gather_rows(table, np.array([0, 0, 2]))).backward()
        assert table.grad.tolist() == [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]

    def test_scatter_roundtrip(self):
        rows = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
        out = T.scatter_rows(rows, np.array([2, 0]), 3)
        assert out.data.tolist() == [[2.0, 3.0], [0.0, 0.0], [0.0, 1.0]]
        T.tsum(out * out).backward()
        assert rows.grad.tolist() == [[0.0, 2.0], [4.0, 6.0]]

    def test_take_per_row(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        out = T.take_per_row(x, np.array([[2], [0]]))
        assert out.data.tolist() == [[2.0], [3.0]]


class TestRng:
    def test_determinism_bitwise(self):
        a = Rng(123).gaussian(100)
        b = Rng(123).gaussian(100)
        assert np.array_equal(a, b)

    def test_spawn_streams_differ(self):
        r = Rng(5)
        assert not np.array_equal(r.spawn("a").gaussian(10), r.spawn("b").gaussian(10))

    def test_spawn_is_stable(self):
        assert np.array_equal(Rng(5).spawn("x").gaussian(4), Rng(5).spawn("x").gaussian(4))

    def test_gaussian_goodness_of_fit(self):
        # Kolmogorov-Smirnov against N(0,1) at n=1e5, alpha=0.01
        n = 100_000
        samples = np.sort(Rng(2024).gaussian(n))
        cdf = 0.5 * (1.0 + np.vectorize(math.erf)(samples / math.sqrt(2.0)))
        emp_hi = np.arange(1, n + 1) / n
        emp_lo = np.arange(0, n) / n
        d = max(np.max(np.abs(emp_hi - cdf)), np.max(np.abs(emp_lo - cdf)))
        assert d < 1.63 / math.sqrt(n)

    def test_counter_advances(self):
        r = Rng(0)
        r.gaussian(3)
        r.uniform(3)
        assert r.counter == 2


class TestTape:
    def test_records_in_topological_order(self):
        with Tape() as tape:
            x = Tensor([1.0, 2.0], requires_grad=True)
            y = T.relu(x)
            z = T.tsum(y * y)
        positions = {id(t): i for i, t in enumerate(tape.records)}
        for rec in tape.records:
            for parent in rec._parents:
                if id(parent) in positions:
                    assert positions[id(parent)] < positions[id(rec)]
        assert positions[id(z)] == len(tape.records) - 1

    def test_nested_tape_isolated(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as outer:
            _ = x * x
            with Tape() as inner:
                _ = x + x
            assert len(inner.records) == 1
        assert len(outer.records) == 1


def test_operation_determinism():
    def build(seed):
        rng = Rng(seed)
        x = Tensor(rng.gaussian(4, 4))
        return T.softmax(T.relu(x @ Tensor(rng.gaussian(4, 4)))).data

    assert np.array_equal(build(9), build(9))
