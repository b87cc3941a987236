import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from atm.interact import (ContextSpec, MulParams, canonical_op, context_indices, context_table,
                          op_add, op_div_log, op_mul_local, op_sub, span_and_interact)
from atm.tensor import finite_diff_check

from oracles import add_loops, context_brute, div_log_loops, mul_local_loops, sub_loops


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_context_examples():
    assert context_indices(3, 8, ContextSpec(2)) == [2, 4]
    assert context_indices(1, 8, ContextSpec(1)) == [2]
    assert context_indices(1, 8, ContextSpec(4)) == [1, 1, 2, 3]
    assert context_indices(8, 8, ContextSpec(1)) == [8]


@pytest.mark.parametrize("z", [0, -2, 3, 5])
def test_context_rejects_bad_range(z):
    with pytest.raises(ValueError):
        ContextSpec(z)


def test_context_rejects_bad_anchor():
    with pytest.raises(ValueError):
        context_indices(0, 4, ContextSpec(2))
    with pytest.raises(ValueError):
        context_indices(5, 4, ContextSpec(2))


@given(T=st.integers(1, 12), z=st.sampled_from([1, 2, 4, 6, 8]), data=st.data())
def test_context_matches_brute_force(T, z, data):
    t = data.draw(st.integers(1, T))
    idx = context_indices(t, T, ContextSpec(z))
    assert idx == context_brute(t, T, z)
    assert len(idx) == z and all(1 <= i <= T for i in idx)
    if z == 2 and 2 <= t <= T - 1:
        assert idx == [t - 1, t + 1]


def test_context_table_is_zero_based():
    assert context_table(3, ContextSpec(2)).tolist() == [[0, 1], [0, 2], [1, 2]]


def test_op_aliases():
    assert canonical_op("÷") == "/" and canonical_op("mul") == "*"
    with pytest.raises(ValueError):
        canonical_op("%")


def test_add_sub_examples(rng):
    assert np.array_equal(op_add([[1.0, 2.0]], [[3.0, 4.0]]).data, [[4.0, 6.0]])
    a = rng.normal(size=(2, 3, 3))
    assert np.array_equal(op_add(a, -a).data, np.zeros_like(a))
    assert np.array_equal(op_sub(a, a).data, np.zeros_like(a))
    assert np.array_equal(op_sub([[5.0]], [[2.0]]).data, [[3.0]])
    b = rng.normal(size=(2, 3, 3))
    assert np.array_equal(op_sub(a, b).data, -op_sub(b, a).data)


def test_pair_ops_reject_shape_mismatch(rng):
    a, b = rng.random((2, 3, 3)), rng.random((2, 3, 4))
    for fn in (op_add, op_sub, op_div_log, op_mul_local):
        with pytest.raises(ValueError):
            fn(a, b)


def test_div_log_examples(rng):
    a = rng.random((2, 4, 4))
    assert np.array_equal(op_div_log(a, a).data, np.zeros_like(a))
    assert op_div_log([[1.0]], [[0.0]], 1.0).data[0, 0] == pytest.approx(math.log(2), abs=1e-15)
    b = rng.random((2, 4, 4))
    assert np.array_equal(op_div_log(a, b).data, -op_div_log(b, a).data)


def test_div_log_rejects_nonpositive_arguments():
    with pytest.raises(ValueError):
        op_div_log([[-1.0]], [[0.0]], 1.0)
    with pytest.raises(ValueError):
        op_div_log([[0.5]], [[0.5]], 0.0 - 0.5)


def test_div_log_all_zero_frames_are_finite():
    z = np.zeros((3, 4, 4))
    assert np.array_equal(op_div_log(z, z).data, z)


def test_mul_local_examples():
    a = np.array([1.0, 2.0]).reshape(2, 1, 1)
    b = np.array([3.0, 4.0]).reshape(2, 1, 1)
    assert op_mul_local(a, b, MulParams(1)).data[0, 0, 0] == 11.0
    out = op_mul_local(a, b, MulParams(3)).data
    assert out.shape == (9, 1, 1)
    assert out[4, 0, 0] == 11.0
    assert np.count_nonzero(out) == 1


def test_mul_params():
    p = MulParams(3)
    assert p.max_offset == 1
    assert p.offsets[0] == (-1, -1) and p.offsets[4] == (0, 0) and p.offsets[5] == (0, 1)
    with pytest.raises(ValueError):
        MulParams(4)
    with pytest.raises(ValueError):
        op_mul_local(np.ones((1, 2, 2)), np.ones((1, 2, 2)), MulParams(2))


def test_mul_local_p1_is_channel_dot(rng):
    a, b = rng.normal(size=(4, 5, 6)), rng.normal(size=(4, 5, 6))
    assert np.allclose(op_mul_local(a, b, MulParams(1)).data[0], (a * b).sum(axis=0))


def test_mul_local_detects_shift():
    a = np.zeros((1, 7, 7))
    a[0, 3, 3] = 1.0
    b = np.roll(a, 1, axis=2)  # content moved one pixel right
    out = op_mul_local(a, b, MulParams(3)).data
    assert out[5, 3, 3] == 1.0 and out.sum() == 1.0


@pytest.mark.parametrize("P", [1, 3])
def test_pair_ops_match_loop_oracles_bitwise(rng, P):
    for _ in range(5):
        C, H, W = rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 9)
        a, b = rng.random((C, H, W)), rng.random((C, H, W))
        assert np.array_equal(op_add(a, b).data, add_loops(a, b))
        assert np.array_equal(op_sub(a, b).data, sub_loops(a, b))
        assert np.array_equal(op_div_log(a, b).data, div_log_loops(a, b))
        assert np.array_equal(op_mul_local(a, b, MulParams(P)).data, mul_local_loops(a, b, P))


def test_mul_local_oracle_3x6x5(rng):
    a, b = rng.normal(size=(3, 6, 5)), rng.normal(size=(3, 6, 5))
    assert np.array_equal(op_mul_local(a, b, MulParams(3)).data, mul_local_loops(a, b, 3))


def test_span_shapes():
    x = np.random.default_rng(0).random((3, 2, 4, 4))
    y = span_and_interact(x, ContextSpec(2), "-")
    assert y.shape == (3, 2, 2, 4, 4) and y.channel_kind == "feature"
    y = span_and_interact(np.random.default_rng(0).random((4, 2, 5, 5)), ContextSpec(4), "*",
                          MulParams(3))
    assert y.shape == (4, 4, 9, 5, 5) and y.channel_kind == "offset"


@pytest.mark.parametrize("z", [1, 2, 4, 6])
@pytest.mark.parametrize("op", ["+", "-", "*", "/"])
def test_span_shape_law(z, op):
    T, C, H = 5, 3, 4
    p = MulParams(3)
    y = span_and_interact(np.random.default_rng(z).random((T, C, H, H)), ContextSpec(z), op, p)
    c_out = 9 if op == "*" else C
    assert y.shape == (T, z, c_out, H, H)


@pytest.mark.parametrize("z", [1, 2, 4, 6])
def test_span_constant_clip_subtraction_is_zero(z):
    x = np.broadcast_to(np.random.default_rng(1).random((1, 2, 3, 3)), (5, 2, 3, 3))
    assert not span_and_interact(x, ContextSpec(z), "-").data.data.any()


def test_span_anchor_is_first_operand(rng):
    x = rng.random((4, 2, 3, 3))
    spec = ContextSpec(2)
    y = span_and_interact(x, spec, "-").data.data
    for t in range(1, 5):
        for s, z in enumerate(context_indices(t, 4, spec)):
            assert np.array_equal(y[t - 1, s], x[t - 1] - x[z - 1])


def test_span_batched_equals_per_clip(rng):
    x = rng.random((2, 4, 2, 3, 3))
    for op in ("+", "-", "*", "/"):
        batched = span_and_interact(x, ContextSpec(2), op, MulParams(3)).data.data
        for b in range(2):
            single = span_and_interact(x[b], ContextSpec(2), op, MulParams(3)).data.data
            assert np.array_equal(batched[b], single)


@pytest.mark.parametrize("op", ["+", "-", "*", "/"])
def test_span_gradients(rng, op):
    x = rng.random((3, 2, 4, 4))
    R = rng.normal(size=(3, 2, 9 if op == "*" else 2, 4, 4))
    f = lambda t: (span_and_interact(t, ContextSpec(2), op, MulParams(3)).data * R).sum()
    assert finite_diff_check(f, x) < 1e-4
