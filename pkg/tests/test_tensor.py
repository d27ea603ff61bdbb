import math
import struct
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from sks import tensor as T
from sks.gradcheck import finite_difference_check
from sks.io import FormatError, decode_tensor, encode_tensor, load_tensor, save_tensor
from sks.nn import Linear, Module
from sks.tensor import Parameter, Tensor

from conftest import numeric_grad


# --- matmul -------------------------------------------------------------------

def test_matmul_identity(f64):
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_row_by_column(f64):
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.shape == (1, 1) and out.data[0, 0] == 11.0


def test_matmul_matches_triple_loop(f64, rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, ref, rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


# --- softmax ------------------------------------------------------------------

def test_softmax_equal_row_is_uniform(f64):
    out = T.softmax_rows(Tensor(np.full((1, 5), 3.7))).data
    np.testing.assert_allclose(out, 0.2, atol=1e-15)


def test_softmax_two_values(f64):
    out = T.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data
    np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)


def test_softmax_matches_direct_formula(f64, rng):
    x = rng.standard_normal((5, 7))
    e = np.exp(x)
    np.testing.assert_allclose(T.softmax_rows(Tensor(x)).data, e / e.sum(1, keepdims=True), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
                  elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_rows_sum_to_one_even_with_extreme_spread(x):
    out = T.softmax_rows(Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


# --- layer norm ---------------------------------------------------------------

def _ln(x, c):
    return T.layer_norm(Tensor(x), Tensor(np.ones(c)), Tensor(np.zeros(c)))


def test_layer_norm_constant_vector_is_zero(f64):
    assert np.array_equal(_ln(np.full((1, 6), 2.5), 6).data, np.zeros((1, 6)))


def test_layer_norm_two_points(f64):
    np.testing.assert_allclose(_ln(np.array([[1.0, 3.0]]), 2).data, [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_matches_mean_variance_oracle(f64, rng):
    x, g, b = rng.standard_normal((4, 8)), rng.standard_normal(8), rng.standard_normal(8)
    mu = x.mean(1, keepdims=True)
    var = ((x - mu) ** 2).mean(1, keepdims=True)
    ref = (x - mu) / np.sqrt(var + 1e-5) * g + b
    out = T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_layer_norm_rejects_mismatched_gain():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


# --- gelu ---------------------------------------------------------------------

def test_gelu_zero(f64):
    assert T.gelu(Tensor([0.0])).data[0] == 0.0


def test_gelu_large_positive_is_identity(f64):
    np.testing.assert_allclose(T.gelu(Tensor([20.0, 50.0])).data, [20.0, 50.0], rtol=1e-12)


def test_gelu_at_one_matches_tanh_formula(f64):
    ref = 0.5 * 1.0 * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (1.0 + 0.044715)))
    assert abs(T.gelu(Tensor([1.0])).data[0] - ref) <= 1e-12


# --- concat -------------------------------------------------------------------

def test_concat_last_vectors(f64):
    assert T.concat_last(Tensor([1.0, 2.0]), Tensor([3.0])).data.tolist() == [1.0, 2.0, 3.0]


def test_concat_last_with_empty_operand(f64, rng):
    a = rng.standard_normal((3, 4))
    out = T.concat_last(Tensor(a), Tensor(np.zeros((3, 0))))
    assert np.array_equal(out.data, a)


def test_concat_last_then_split_recovers_operands(f64, rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 5))
    out = T.concat_last(Tensor(a), Tensor(b))
    assert out.shape == (2, 8)
    assert np.array_equal(T.getitem(out, (slice(None), slice(0, 3))).data, a)
    assert np.array_equal(T.getitem(out, (slice(None), slice(3, 8))).data, b)


def test_concat_last_leading_mismatch():
    with pytest.raises(ValueError, match="leading"):
        T.concat_last(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))


# --- backward -----------------------------------------------------------------

def test_backward_of_sum_is_ones(f64):
    p = Parameter(np.arange(6.0).reshape(2, 3), "p")
    with T.Tape():
        loss = T.sum_(p)
    T.backward(loss)
    assert np.array_equal(p.grad, np.ones((2, 3)))


def test_backward_of_half_square(f64):
    p = Parameter([1.0, -2.0], "p")
    with T.Tape():
        loss = T.sum_(p * p) / 2.0
    T.backward(loss)
    np.testing.assert_allclose(p.grad, [1.0, -2.0], atol=0)


def test_backward_rejects_non_scalar(f64):
    p = Parameter([1.0, 2.0], "p")
    with T.Tape():
        y = p * 2.0
    with pytest.raises(ValueError, match="scalar"):
        T.backward(y)


def test_backward_without_tape(f64):
    p = Parameter([1.0, 2.0], "p")
    loss = T.sum_(p)
    with pytest.raises(RuntimeError, match="Tape"):
        T.backward(loss)


def test_gradients_accumulate_on_reuse_and_across_calls(f64):
    p = Parameter([3.0], "p")
    with T.Tape():
        loss = T.sum_(p * 2.0 + p)
    T.backward(loss)
    assert p.grad.tolist() == [3.0]
    with T.Tape():
        loss = T.sum_(p)
    T.backward(loss)
    assert p.grad.tolist() == [4.0]


def test_tape_is_topological_and_each_node_visited_once(f64):
    p = Parameter([0.5, -1.5], "p")
    with T.Tape() as tape:
        y = T.tanh(p) * p
        loss = T.sum_(T.exp(y) + y)
    seen = {id(p)}
    for node in tape.nodes:
        assert all(id(i) in seen or not i.requires_grad for i in node.inputs)
        seen.add(id(node.output))
    calls = []
    for node in tape.nodes:
        fn = node.backward_fn
        node.backward_fn = (lambda f, n: lambda g: (calls.append(n.index), f(g))[1])(fn, node)
    T.backward(loss)
    assert calls == sorted(calls, reverse=True)
    assert len(calls) == len(set(calls)) == len(tape.nodes)


def test_ops_outside_tape_are_not_recorded(f64):
    p = Parameter([1.0], "p")
    with T.Tape() as tape:
        with T.no_tape():
            T.exp(p)
        T.exp(p)
    assert tape.ops() == ["exp"]


def _w(rng, shape):
    return Tensor(rng.standard_normal(shape))


def _loss_cases(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 5))
    w = rng.standard_normal((3, 5))
    cases = {
        "matmul": ([a, b], lambda x, y: T.matmul(x, y) * Tensor(w)),
        "batched_matmul": ([rng.standard_normal((2, 3, 4)), b], lambda x, y: T.matmul(x, y)),
        "softmax": ([rng.standard_normal((3, 6))], lambda x, w=_w(rng, (3, 6)): T.softmax_rows(x) * w),
        "log_softmax": ([rng.standard_normal((3, 4))], lambda x: T.log_softmax(x) * Tensor(a)),
        "layer_norm": ([rng.standard_normal((3, 5)), rng.standard_normal(5), rng.standard_normal(5)],
                       lambda x, g, c, w=_w(rng, (3, 5)): T.layer_norm(x, g, c) * w),
        "gelu": ([rng.standard_normal((4, 4)) * 2], lambda x, w=_w(rng, (4, 4)): T.gelu(x) * w),
        "tanh": ([rng.standard_normal(5)], T.tanh),
        "sigmoid": ([rng.standard_normal(5) * 3], T.sigmoid),
        "exp_log": ([rng.random(5) + 0.5], lambda x: T.log(x) + T.exp(x)),
        "div_broadcast": ([rng.standard_normal((3, 4)), rng.random(4) + 1.0], lambda x, y: x / y),
        "mul_broadcast": ([rng.standard_normal((2, 3, 4)), rng.standard_normal((3, 1))], lambda x, y: x * y),
        "sub": ([a, rng.standard_normal((1, 4))], lambda x, y: (x - y) * (x - y)),
        "concat": ([a, rng.standard_normal((3, 2))], lambda x, y, w=_w(rng, (3, 6)): T.concat_last(x, y) * w),
        "reshape_transpose": ([rng.standard_normal((2, 3, 4))],
                              lambda x, w=_w(rng, (4, 6)): T.transpose(T.reshape(x, (6, 4)), (1, 0)) * w),
        "roll": ([rng.standard_normal((1, 4, 4, 2))],
                 lambda x, w=_w(rng, (1, 4, 4, 2)): T.roll(x, (-1, -1), axis=(1, 2)) * w),
        "mean_axis": ([rng.standard_normal((3, 4, 5))], lambda x, w=_w(rng, 5): T.mean(x, axis=(0, 1)) * w),
        "take_rows": ([rng.standard_normal((5, 2))],
                      lambda t, w=_w(rng, (6, 2)): T.take_rows(t, np.array([0, 3, 3, 1, 4, 0])) * w),
        "getitem": ([rng.standard_normal((3, 4))], lambda x: T.getitem(x, (np.array([0, 2, 2]), np.array([1, 0, 1])))),
    }
    return cases


@pytest.mark.parametrize("case", list(_loss_cases(np.random.default_rng(0))))
def test_op_adjoint_matches_central_differences(case, f64):
    rng = np.random.default_rng(7)
    inputs, fn = _loss_cases(rng)[case]
    params = [Parameter(x.copy(), f"x{i}") for i, x in enumerate(inputs)]

    def loss():
        return T.sum_(fn(*params))

    with T.Tape():
        out = loss()
    T.backward(out)
    for p in params:
        with T.no_tape():
            num = numeric_grad(lambda: loss().item(), p.data)
        np.testing.assert_allclose(p.grad, num, rtol=1e-4, atol=1e-8)


# --- finite-difference harness --------------------------------------------------

class _LinearModel(Module):
    def __init__(self):
        self.lin = Linear(4, 3, name="lin", seed=0, bias=False)


def test_finite_difference_check_linear_model(f64, rng):
    model = _LinearModel()
    x = rng.standard_normal((5, 4))
    target = rng.standard_normal((5, 3))
    report = finite_difference_check(model, lambda m: T.sum_(m.lin(Tensor(x)) * Tensor(target)), 12)
    assert report.checked == 12
    assert report.max_rel_error <= 1e-8


def test_finite_difference_check_requires_f64():
    model = _LinearModel()
    with pytest.raises(TypeError, match="64-bit"):
        finite_difference_check(model, lambda m: T.sum_(m.lin.weight), 4)


def test_debug_mode_names_the_offending_op(f64):
    with T.debug_mode(True), np.errstate(invalid="ignore"):
        with pytest.raises(FloatingPointError, match="log"):
            T.log(Tensor([-1.0]))


def test_forward_replay_is_bitwise_identical(rng):
    x = rng.standard_normal((6, 4)).astype(np.float32)

    def run():
        lin = Linear(4, 8, name="a", seed=3)
        return T.softmax_rows(T.gelu(lin(Tensor(x)))).data

    assert run().tobytes() == run().tobytes()


def test_precision_modes():
    with T.precision("f32"):
        assert Tensor([1.0]).dtype == np.float32
        assert (Tensor([1.0]) * 2.5).dtype == np.float32
    with T.precision("f64"):
        assert Tensor([1.0]).dtype == np.float64
    with pytest.raises(ValueError):
        T.set_default_dtype("f16")


# --- SKST file format -----------------------------------------------------------

def test_skst_layout(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    blob = encode_tensor(arr, "w")
    assert blob[:4] == b"SKST"
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen])
    assert header == {"name": "w", "dtype": "f32", "shape": [2, 3]}
    assert blob[8 + hlen:] == arr.astype("<f4").tobytes()


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_skst_round_trip(tmp_path, rng, dtype):
    arr = rng.standard_normal((3, 2, 4)).astype(dtype)
    save_tensor(tmp_path / "x.skst", arr, "x")
    back = load_tensor(tmp_path / "x.skst")
    assert back.dtype == dtype and back.tobytes() == arr.tobytes()
    assert encode_tensor(back, "x") == (tmp_path / "x.skst").read_bytes()


def test_skst_rejects_bad_magic_and_truncation():
    blob = encode_tensor(np.zeros(4), "z")
    with pytest.raises(FormatError):
        decode_tensor(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        decode_tensor(blob[:-3])


def test_tiny_gradients_are_flushed_to_zero():
    limit = float(np.sqrt(np.finfo(np.float32).tiny))
    with T.precision("f32"):
        p = Parameter([1.0, 1.0, 1.0], "p")
        scale = Tensor([limit * 0.5, limit * 2.0, 0.0])
        with T.Tape():
            loss = T.sum_(p * scale)
        T.backward(loss)
    assert p.grad[0] == 0.0
    assert p.grad[1] == np.float32(limit * 2.0)
    assert p.grad[2] == 0.0
