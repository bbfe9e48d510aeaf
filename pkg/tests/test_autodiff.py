import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pmdp import autodiff as ad
from pmdp.autodiff import Tape, Tensor, backward, finite_diff_check


def grad_of(fn, **values):
    tape = Tape()
    leaves = {k: tape.param(k, v) for k, v in values.items()}
    return backward(tape, fn(**leaves))


# -- forward examples

def test_relu_forward():
    np.testing.assert_array_equal(ad.relu([-2.5, 3.0]).data, [0.0, 3.0])


def test_softmax_equal_logits():
    np.testing.assert_allclose(ad.softmax_rows(np.zeros((1, 3))).data, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_sq_l2_norm():
    assert ad.sq_l2_norm([3.0, 4.0]).item() == 25.0


def test_forward_op_dispatch_and_unknown_kind():
    assert ad.forward_op("sq_l2_norm", [3.0, 4.0]).item() == 25.0
    with pytest.raises(ad.ContractError):
        ad.forward_op("conv2d", [1.0])


def test_shape_mismatch_raises_dimension_error():
    with pytest.raises(ad.DimensionError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ad.DimensionError):
        ad.add(np.ones((2, 3)), np.ones(2))
    with pytest.raises(ad.DimensionError):
        ad.mul(np.ones((2, 3)), np.ones(3))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_raises_numeric_error():
    with pytest.raises(ad.NumericError):
        ad.scale([1e308], 10.0)
    with pytest.raises(ad.NumericError):
        ad.add([np.nan], [1.0])


def test_constants_are_not_recorded():
    out = ad.add(np.ones(2), np.ones(2))
    assert out.node is None and out.tape is None


# -- backward examples

def test_grad_square():
    g = grad_of(lambda x: ad.mul(x, x), x=np.array(3.0))
    assert g["x"] == 6.0


def test_grad_sum_relu():
    g = grad_of(lambda x: ad.sum(ad.relu(x)), x=np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(g["x"], [0.0, 1.0])


def test_grad_l1_sign_and_zero_subgradient():
    g = grad_of(lambda x: ad.l1_norm(x), x=np.array([-0.5, 0.7, 0.0]))
    np.testing.assert_array_equal(g["x"], [-1.0, 1.0, 0.0])


def test_relu_derivative_at_zero_is_zero():
    g = grad_of(lambda x: ad.sum(ad.relu(x)), x=np.array([0.0]))
    assert g["x"][0] == 0.0


def test_unused_leaf_gets_zero_gradient():
    g = grad_of(lambda x, y: ad.sq_l2_norm(x), x=np.ones(2), y=np.ones((2, 3)))
    np.testing.assert_array_equal(g["y"], np.zeros((2, 3)))


def test_non_scalar_loss_is_contract_error():
    tape = Tape()
    x = tape.param("x", np.ones(3))
    with pytest.raises(ad.ContractError):
        backward(tape, ad.relu(x))


def test_leaf_registered_twice_is_rejected():
    tape = Tape()
    tape.param("x", 1.0)
    with pytest.raises(ad.ContractError):
        tape.param("x", 2.0)


def test_tape_records_in_topological_order():
    tape = Tape()
    x = tape.param("x", np.ones((2, 2)))
    ad.sum(ad.relu(ad.matmul(x, x)))
    for node, parents in enumerate(tape.parents):
        assert all(p is None or p < node for p in parents)


# -- finite differences

def test_fd_check_quadratic():
    err = finite_diff_check(lambda p: ad.mul(p["x"], p["x"]), {"x": np.array(3.0)}, h=1e-5)
    assert err < 1e-7


def away_from_kinks(rng, shape, low=1e-3):
    x = rng.normal(size=shape)
    x[np.abs(x) < low] = low
    return x


OP_CASES = {
    "matmul": lambda p: ad.sum(ad.matmul(p["a"], p["b"])),
    "add_bias": lambda p: ad.sq_l2_norm(ad.add(p["a"], p["c"])),
    "sub": lambda p: ad.sq_l2_norm(ad.sub(p["a"], ad.matmul(p["a"], p["b"]))),
    "elemwise_mul": lambda p: ad.sum(ad.mul(p["a"], p["a"])),
    "relu": lambda p: ad.sum(ad.mul(ad.relu(p["a"]), p["a"])),
    "leaky_relu": lambda p: ad.sq_l2_norm(ad.leaky_relu(p["a"])),
    "sum_axis": lambda p: ad.sq_l2_norm(ad.sum(p["a"], axis=0)),
    "mean": lambda p: ad.sq_l2_norm(ad.mean(p["a"], axis=1)),
    "l1_norm": lambda p: ad.l1_norm(p["a"]),
    "softmax_rows": lambda p: ad.sum(ad.mul(ad.softmax_rows(p["a"]), p["w"])),
    "scale": lambda p: ad.scale(ad.sq_l2_norm(p["a"]), -2.5),
    "max_scalar": lambda p: ad.sq_l2_norm(ad.max_scalar(p["a"], 0.3)),
    "row_norms": lambda p: ad.sum(ad.row_norms(p["a"])),
    "rows_concat": lambda p: ad.sq_l2_norm(ad.concat_rows([ad.rows(p["a"], 1, 3), p["a"]])),
    "columns_stack": lambda p: ad.sq_l2_norm(ad.mul(ad.stack_columns([ad.columns(p["a"], 2), ad.columns(p["a"], 0)]),
                                                    ad.stack_columns([ad.columns(p["a"], 1), ad.columns(p["a"], 1)]))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_every_op_matches_central_differences(name):
    rng = np.random.default_rng(7)
    a = away_from_kinks(rng, (3, 4))
    a[np.abs(a - 0.3) < 1e-3] = 0.31
    params = {"a": a, "b": rng.normal(size=(4, 4)), "c": rng.normal(size=4), "w": rng.normal(size=(3, 4))}
    assert finite_diff_check(OP_CASES[name], params, h=1e-6) < 1e-4


def test_fd_check_reports_inf_on_non_finite():
    def blowup(p):
        return ad.scale(ad.sq_l2_norm(p["x"]), 1e308)

    assert finite_diff_check(blowup, {"x": np.array([10.0])}) == float("inf")


# -- properties

@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-3, 3)),
       st.floats(-4, 4), st.floats(-4, 4))
def test_backward_is_linear(x, a, b):
    def f(t):
        return ad.sq_l2_norm(ad.relu(t))

    def g(t):
        return ad.sum(ad.mul(t, t))

    combo = grad_of(lambda t: ad.add(ad.scale(f(t), a), ad.scale(g(t), b)), t=x)["t"]
    expect = a * grad_of(f, t=x)["t"] + b * grad_of(g, t=x)["t"]
    np.testing.assert_allclose(combo, expect, rtol=0, atol=1e-10)


def test_determinism_bit_identical():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 4))

    def run():
        tape = Tape()
        W = tape.param("W", w)
        loss = ad.l1_norm(ad.softmax_rows(ad.matmul(ad.as_tensor(x), W)))
        return loss.item(), backward(tape, loss)["W"].tobytes()

    assert run() == run()


# -- Adam

def test_adam_first_step_is_lr():
    p = {"w": np.zeros(3)}
    state = ad.AdamState(lr=5e-4)
    new, state = ad.adam_step(p, {"w": np.ones(3)}, state)
    np.testing.assert_allclose(new["w"], -5e-4 / (1 + 1e-8), rtol=1e-12)
    assert state.t == 1


def test_adam_zero_grad_leaves_params_and_decays_moments():
    p = {"w": np.array([1.0, -2.0])}
    state = ad.AdamState()
    p1, state = ad.adam_step(p, {"w": np.array([1.0, 1.0])}, state)
    m_before, v_before = state.m["w"].copy(), state.v["w"].copy()
    p2, state = ad.adam_step(p1, {"w": np.zeros(2)}, state)
    assert np.all(np.abs(state.m["w"]) < np.abs(m_before))
    assert np.all(state.v["w"] < v_before)
    # the bias-corrected first moment still moves the parameters after a real step,
    # but a fresh state with zero gradient leaves them fixed
    p3, _ = ad.adam_step(p, {"w": np.zeros(2)}, ad.AdamState())
    np.testing.assert_array_equal(p3["w"], p["w"])


def test_adam_constant_gradient_steps_do_not_grow():
    p = {"w": np.zeros(4)}
    state = ad.AdamState(lr=1e-3)
    g = {"w": np.array([0.3, -1.0, 2.0, 1e-3])}
    p1, state = ad.adam_step(p, g, state)
    p2, state = ad.adam_step(p1, g, state)
    d1, d2 = np.abs(p1["w"] - p["w"]), np.abs(p2["w"] - p1["w"])
    assert np.all(d2 <= d1 * (1 + 1e-6))
    assert state.t == 2


def test_adam_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, ad.AdamState())


def test_fd_check_detects_gradient_that_bypasses_the_tape():
    def leaky(p):
        # the second term is computed outside the tape, so its gradient is lost
        return ad.add(ad.sq_l2_norm(p["x"]), Tensor(np.sum(p["x"].data ** 3)))

    assert finite_diff_check(leaky, {"x": np.array([0.5, -1.2])}, h=1e-6) > 0.1
