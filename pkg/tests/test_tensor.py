import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchmoe import tensor as T
from util_fd import gradcheck


@pytest.fixture
def nprng():
    return np.random.default_rng(0)


class TestMatmul:
    def test_identity(self):
        a = T.Tensor(np.eye(2))
        b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.allclose(T.matmul(a, b).data, [[1, 2], [3, 4]])

    def test_hand_computed(self):
        out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
        assert np.allclose(out.data, [[11.0]])

    def test_zero_case(self, nprng):
        out = T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(nprng.standard_normal((3, 2))))
        assert np.all(out.data == 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(T.softmax(T.Tensor([0.0, 0.0]), axis=0).data, [0.5, 0.5])

    def test_analytic_ratio(self):
        out = T.softmax(T.Tensor([math.log(1.0), math.log(3.0)]), axis=0)
        assert np.allclose(out.data, [0.25, 0.75], atol=1e-6)

    def test_stabilized(self):
        out = T.softmax(T.Tensor([1000.0, 0.0]), axis=0)
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(1.0)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one_and_positive(self, xs):
        out = T.softmax(T.Tensor(np.asarray(xs, dtype=np.float64)), axis=0).data
        assert abs(out.sum() - 1.0) < 1e-6
        assert np.all(out > 0)


class TestLayerNorm:
    def test_constant_input_maps_to_zero(self):
        x = T.Tensor(np.full((3, 4), 7.0))
        out = T.layer_norm(x, T.Tensor(np.ones(4)), T.Tensor(np.zeros(4)))
        assert np.allclose(out.data, 0.0, atol=1e-3)

    def test_two_point_case(self):
        out = T.layer_norm(T.Tensor([1.0, 3.0]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)),
                           eps=1e-12)
        assert np.allclose(out.data, [-1.0, 1.0], atol=1e-5)

    def test_zero_gain_broadcasts_bias(self, nprng):
        x = T.Tensor(nprng.standard_normal((2, 5)))
        bias = np.arange(5.0, dtype=np.float32)
        out = T.layer_norm(x, T.Tensor(np.zeros(5)), T.Tensor(bias))
        assert np.allclose(out.data, np.broadcast_to(bias, (2, 5)))


class TestActivations:
    def test_silu_zero(self):
        assert T.silu(T.Tensor([0.0])).data[0] == 0.0

    def test_relu_negative(self):
        assert T.relu(T.Tensor([-1.0])).data[0] == 0.0

    def test_silu_one(self):
        assert T.silu(T.Tensor([1.0])).data[0] == pytest.approx(1.0 / (1.0 + math.exp(-1)))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.activation(T.Tensor([1.0]), "tanhh")


class TestMinMax:
    def test_fit_by_inspection(self):
        p = T.minmax_fit(np.array([[0.0, 2.0], [1.0, 4.0]]))
        assert np.allclose(p.min, [0, 2]) and np.allclose(p.max, [1, 4])
        assert not p.degenerate.any()

    def test_single_row_degenerate(self):
        p = T.minmax_fit(np.array([[3.0, 5.0]]))
        assert p.degenerate.all()
        assert np.allclose(T.minmax_apply(p, np.array([[3.0, 5.0]])), 0.0)

    def test_apply_formula(self):
        p = T.ScalerParams(np.array([0.0]), np.array([2.0]))
        assert T.minmax_apply(p, np.array([1.0]))[0] == pytest.approx(0.5)

    def test_round_trip(self, nprng):
        x = nprng.standard_normal((10, 4))
        p = T.minmax_fit(x)
        assert np.allclose(T.minmax_invert(p, T.minmax_apply(p, x)), x, atol=1e-6)

    def test_idempotent_on_unit_data(self, nprng):
        x = nprng.random((6, 3))
        x[0] = 0.0
        x[1] = 1.0
        p = T.minmax_fit(x)
        assert np.allclose(T.minmax_apply(p, x), x, atol=1e-6)

    def test_channel_mismatch(self):
        p = T.ScalerParams(np.zeros(3), np.ones(3))
        with pytest.raises(ValueError):
            T.minmax_apply(p, np.zeros((2, 4)))

    def test_empty_input(self):
        with pytest.raises(ValueError):
            T.minmax_fit(np.zeros((0, 3)))


class TestCosine:
    def test_self_similarity(self, nprng):
        a = T.Tensor(nprng.standard_normal(5))
        assert T.cosine_similarity(a, a).item() == pytest.approx(1.0, abs=1e-5)

    def test_orthogonal(self):
        assert T.cosine_similarity(T.Tensor([1.0, 0.0]), T.Tensor([0.0, 1.0])).item() == \
            pytest.approx(0.0, abs=1e-6)

    def test_scale_invariance(self, nprng):
        a = nprng.standard_normal(4)
        for lam in (0.5, 2.0, 17.0):
            s1 = T.cosine_similarity(T.Tensor(a), T.Tensor(lam * a)).item()
            s2 = T.cosine_similarity(T.Tensor(a), T.Tensor(a)).item()
            assert s1 == pytest.approx(s2, abs=1e-6)

    def test_zero_vector(self):
        assert T.cosine_similarity(T.Tensor([0.0, 0.0]), T.Tensor([1.0, 2.0])).item() == 0.0

    def test_matrix_matches_scalar(self, nprng):
        x = nprng.standard_normal((3, 4))
        c = nprng.standard_normal((2, 4))
        mat = T.cosine_matrix(T.Tensor(x), T.Tensor(c)).data
        for i in range(3):
            for j in range(2):
                assert mat[i, j] == pytest.approx(
                    T.cosine_similarity(T.Tensor(x[i]), T.Tensor(c[j])).item(), abs=1e-5)


OPS = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
    "add_broadcast": (lambda a, b: T.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: T.sub(a, b), [(2, 3), (2, 3)]),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
    "mul_broadcast": (lambda a, b: T.mul(a, b), [(2, 3, 4), (4,)]),
    "div": (lambda a, b: T.div(a, T.add(T.mul(b, b), T.Tensor(1.0))), [(3,), (3,)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 2)]),
    "matmul_broadcast_weight": (lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "reshape": (lambda a: T.reshape(a, (6,)), [(2, 3)]),
    "transpose": (lambda a: T.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    "sum_all": (lambda a: T.tsum(a), [(3, 4)]),
    "sum_axis": (lambda a: T.tsum(a, axis=1), [(3, 4)]),
    "mean_axis": (lambda a: T.tmean(a, axis=0, keepdims=True), [(3, 4)]),
    "take": (lambda a: T.take(a, np.array([2, 0, 2])), [(4, 3)]),
    "concat": (lambda a, b: T.concat([a, b], axis=0), [(2, 3), (4, 3)]),
    "scatter_rows": (lambda a: T.scatter_rows(a, np.array([1, 3, 1]), 5), [(3, 2)]),
    "sqrt": (lambda a: T.sqrt(T.add(T.mul(a, a), T.Tensor(1.0))), [(4,)]),
    "log": (lambda a: T.log(T.add(T.mul(a, a), T.Tensor(1.0))), [(4,)]),
    "softmax": (lambda a: T.softmax(a, axis=-1), [(3, 5)]),
    "log_softmax": (lambda a: T.log_softmax(a, axis=-1), [(3, 5)]),
    "layer_norm": (lambda x, g, b: T.layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
    "relu": (lambda a: T.relu(T.add(a, T.Tensor(0.3))), [(3, 4)]),
    "silu": (lambda a: T.silu(a), [(3, 4)]),
    "gelu": (lambda a: T.gelu(a), [(3, 4)]),
    "cosine_similarity": (lambda a, b: T.cosine_similarity(a, b), [(5,), (5,)]),
    "cosine_matrix": (lambda a, b: T.cosine_matrix(a, b), [(3, 4), (2, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_backward_matches_finite_differences(name):
    op, shapes = OPS[name]
    for seed in range(3):
        gradcheck(op, shapes, np.random.default_rng(seed), label=name)


def test_minmax_apply_gradcheck():
    params = T.ScalerParams(np.array([-1.0, 0.0, 0.5]), np.array([1.0, 0.0, 2.0]))
    gradcheck(lambda x: T.minmax_apply(params, x), [(4, 3)],
              np.random.default_rng(7), label="minmax_apply")


class TestRng:
    def test_bit_identical_streams(self):
        a = T.Rng(123).normal((100,))
        b = T.Rng(123).normal((100,))
        assert np.array_equal(a, b)

    def test_children_are_independent_but_deterministic(self):
        r = T.Rng(5)
        assert np.array_equal(r.child(1).normal((8,)), T.Rng(5).child(1).normal((8,)))
        assert not np.array_equal(T.Rng(5).child(1).normal((8,)), T.Rng(5).child(2).normal((8,)))


class TestBlob:
    def test_round_trip(self, nprng):
        for dtype in (np.float32, np.float64):
            buf = io.BytesIO()
            arr = nprng.standard_normal((2, 3, 4)).astype(dtype)
            off = T.write_blob(buf, arr)
            out = T.read_blob(buf, off)
            assert out.dtype == dtype
            assert np.array_equal(out, arr)

    def test_multiple_records_by_offset(self, nprng):
        buf = io.BytesIO()
        a = nprng.standard_normal(3).astype(np.float32)
        b = nprng.standard_normal((2, 2)).astype(np.float32)
        off_a = T.write_blob(buf, a)
        off_b = T.write_blob(buf, b)
        assert np.array_equal(T.read_blob(buf, off_b), b)
        assert np.array_equal(T.read_blob(buf, off_a), a)

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            T.read_blob(io.BytesIO(b"NOTMAGIC" + b"\0" * 16))

    def test_scalar_rank_zero(self):
        buf = io.BytesIO()
        T.write_blob(buf, np.float32(3.5))
        out = T.read_blob(buf, 0)
        assert out.shape == ()
        assert out == np.float32(3.5)


def test_dropout_inactive_is_identity(nprng):
    x = T.Tensor(nprng.standard_normal((4, 4)))
    assert T.dropout(x, 0.5, T.Rng(0), active=False) is x


def test_dropout_preserves_expectation():
    x = T.Tensor(np.ones((2000,)))
    out = T.dropout(x, 0.25, T.Rng(3), active=True)
    assert out.data.mean() == pytest.approx(1.0, abs=0.05)
