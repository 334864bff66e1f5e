"""
Tests for the tape-based autodiff engine and the Adam optimizer.
"""
import numpy as np
import pytest

from autodiff import (AdamState, Tape, Tensor, adam_step, add, backward, check_gradients, constant, conv1d, div,
                      exp, getitem, gru_step, log, logsumexp, matmul, mul, reduce_mean, reduce_sum, relu,
                      reshape, sigmoid, stack, sub, tanh, transpose)
from errors import CpcLabError, InputTooShortError, NonFiniteError, ShapeError


def _grads(fn, **inputs):
    tape = Tape()
    watched = {k: tape.watch(v) for k, v in inputs.items()}
    grads = backward(fn(**watched))
    return {k: grads[t.node].value for k, t in watched.items()}


# ===========================================================================
# Forward values
# ===========================================================================

class TestForward:
    def test_elementwise_values(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.uniform(0.5, 2.0, (4,))
        np.testing.assert_allclose(add(a, b).value, a + b)
        np.testing.assert_allclose(sub(a, b).value, a - b)
        np.testing.assert_allclose(mul(a, b).value, a * b)
        np.testing.assert_allclose(div(a, b).value, a / b)
        np.testing.assert_allclose(relu(a).value, np.maximum(a, 0))
        np.testing.assert_allclose(sigmoid(a).value, 1 / (1 + np.exp(-a)))
        np.testing.assert_allclose(tanh(a).value, np.tanh(a))

    def test_operators_match_functions(self, rng):
        a, b = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 3)))
        np.testing.assert_allclose((a + b).value, add(a, b).value)
        np.testing.assert_allclose((a * b - a / (b * b + 1.0)).value,
                                   sub(mul(a, b), div(a, add(mul(b, b), 1.0))).value)
        np.testing.assert_allclose((-a).value, -a.value)

    def test_constants_record_nothing(self):
        out = mul(constant([1.0, 2.0]), 3.0)
        assert out.node is None and not out.requires_grad
        np.testing.assert_allclose(out.value, [3.0, 6.0])

    def test_matmul_batched(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        np.testing.assert_allclose(matmul(a, b).value, a @ b)

    def test_matmul_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(np.zeros((2, 3)), np.zeros((4, 5)))

    def test_conv1d_matches_direct_loop(self, rng):
        x, k = rng.standard_normal((2, 3, 11)), rng.standard_normal((4, 3, 3))
        out = conv1d(x, k, stride=2).value
        assert out.shape == (2, 4, 5)
        expected = np.zeros_like(out)
        for t in range(5):
            window = x[:, :, 2 * t:2 * t + 3]
            expected[:, :, t] = np.einsum("bcw,ocw->bo", window, k)
        np.testing.assert_allclose(out, expected)

    def test_conv1d_unbatched(self, rng):
        x, k = rng.standard_normal((3, 8)), rng.standard_normal((2, 3, 4))
        np.testing.assert_allclose(conv1d(x, k).value, conv1d(x[None], k).value[0])

    def test_conv1d_too_short(self):
        with pytest.raises(InputTooShortError):
            conv1d(np.zeros((1, 2, 3)), np.zeros((1, 2, 4)))

    def test_conv1d_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv1d(np.zeros((1, 2, 8)), np.zeros((1, 3, 4)))

    def test_gru_with_zero_weights_halves_state(self, rng):
        d, e = 4, 3
        params = {"w_x": np.zeros((e, 3 * d)), "w_h": np.zeros((d, 3 * d)),
                  "b_x": np.zeros(3 * d), "b_h": np.zeros(3 * d)}
        h = rng.standard_normal((2, d))
        # reset = update = 0.5, candidate = tanh(0) = 0
        np.testing.assert_allclose(gru_step(h, rng.standard_normal((2, e)), params).value, 0.5 * h)

    def test_gru_vector_matches_batch(self, rng):
        d, e = 3, 2
        params = {"w_x": rng.standard_normal((e, 3 * d)), "w_h": rng.standard_normal((d, 3 * d)),
                  "b_x": rng.standard_normal(3 * d), "b_h": rng.standard_normal(3 * d)}
        h, x = rng.standard_normal(d), rng.standard_normal(e)
        np.testing.assert_allclose(gru_step(h, x, params).value, gru_step(h[None], x[None], params).value[0])

    def test_gru_shape_error(self):
        params = {"w_x": np.zeros((2, 9)), "w_h": np.zeros((3, 9)), "b_x": np.zeros(9), "b_h": np.zeros(9)}
        with pytest.raises(ShapeError):
            gru_step(np.zeros(4), np.zeros(2), params)

    def test_logsumexp_is_stable(self):
        out = logsumexp(np.array([1000.0, 1000.0])).item()
        assert out == pytest.approx(1000.0 + np.log(2.0), abs=1e-12)

    def test_logsumexp_empty(self):
        with pytest.raises(ShapeError):
            logsumexp(np.zeros(0))

    @pytest.mark.parametrize("c", [-1e3, -2.5, 3.7, 1e3])
    def test_logsumexp_shift(self, rng, c):
        v = 10 * rng.standard_normal(9)
        shifted = logsumexp(v + c).item()
        assert shifted == pytest.approx(logsumexp(v).item() + c, rel=1e-14, abs=1e-12)

    def test_item_needs_one_element(self):
        assert Tensor(np.array([[2.5]])).item() == 2.5
        with pytest.raises(ShapeError, match=r"\(3,\)"):
            Tensor(np.zeros(3)).item()

    def test_non_finite_from_finite_inputs(self):
        with np.errstate(all="ignore"):
            with pytest.raises(NonFiniteError):
                log(np.array([0.0, 1.0]))
            with pytest.raises(NonFiniteError):
                exp(np.array([1e4]))

    def test_stack_and_reduce(self, rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        np.testing.assert_allclose(stack([a, b], axis=1).value, np.stack([a, b], axis=1))
        np.testing.assert_allclose(reduce_sum(a, axis=0).value, a.sum(axis=0))
        assert reduce_mean(a).item() == pytest.approx(a.mean())

    def test_stack_empty(self):
        with pytest.raises(ShapeError):
            stack([])


# ===========================================================================
# Backward
# ===========================================================================

class TestBackward:
    def test_broadcast_gradient_is_summed(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4,))
        grads = _grads(lambda a, b: reduce_sum(add(a, b)), a=a, b=b)
        np.testing.assert_allclose(grads["a"], np.ones((3, 4)))
        np.testing.assert_allclose(grads["b"], np.full(4, 3.0))

    def test_reused_node_accumulates(self, rng):
        a = rng.standard_normal(5)
        grads = _grads(lambda a: reduce_sum(mul(a, a)), a=a)
        np.testing.assert_allclose(grads["a"], 2 * a)

    def test_unreached_leaf_gets_zero(self, rng):
        grads = _grads(lambda a, b: reduce_sum(a), a=rng.standard_normal(3), b=rng.standard_normal((2, 2)))
        np.testing.assert_array_equal(grads["b"], np.zeros((2, 2)))

    def test_fancy_index_repeats_accumulate(self):
        grads = _grads(lambda a: reduce_sum(getitem(a, np.array([0, 0, 2]))), a=np.arange(4.0))
        np.testing.assert_allclose(grads["a"], [2.0, 0.0, 1.0, 0.0])

    def test_non_scalar_loss(self, rng):
        tape = Tape()
        with pytest.raises(ShapeError):
            backward(mul(tape.watch(rng.standard_normal(3)), 2.0))

    def test_constant_loss(self):
        with pytest.raises(CpcLabError):
            backward(constant(1.0))

    def test_mixed_tapes(self):
        a, b = Tape().watch(1.0), Tape().watch(2.0)
        with pytest.raises(CpcLabError, match="different tapes"):
            add(a, b)

    def test_softmax_gradient_of_logsumexp(self, rng):
        v = rng.standard_normal(6)
        grads = _grads(lambda v: logsumexp(v), v=v)
        np.testing.assert_allclose(grads["v"], np.exp(v) / np.exp(v).sum(), atol=1e-12)

    def test_same_seed_gives_bit_identical_gradients(self):
        def run(seed):
            rng = np.random.default_rng(seed)
            w, x = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
            return _grads(lambda w: logsumexp(reduce_sum(tanh(matmul(x, transpose(w))), axis=0)), w=w)["w"]

        first, second = run(7), run(7)
        assert first.tobytes() == second.tobytes()
        assert run(8).tobytes() != first.tobytes()


# ===========================================================================
# Finite differences
# ===========================================================================

class TestCheckGradients:
    @pytest.mark.parametrize("name,fn,shapes", [
        ("div", lambda t: reduce_sum(div(t["a"], t["b"])), {"a": (3,), "b": (3,)}),
        ("transpose", lambda t: reduce_sum(mul(transpose(t["a"]), t["w"])), {"a": (2, 3), "w": (3, 2)}),
        ("reshape", lambda t: reduce_sum(mul(reshape(t["a"], (3, 2)), t["w"])), {"a": (2, 3), "w": (3, 2)}),
        ("matmul", lambda t: reduce_sum(tanh(matmul(t["a"], t["b"]))), {"a": (2, 3), "b": (3, 4)}),
        ("conv1d", lambda t: reduce_sum(tanh(conv1d(t["x"], t["k"], 3))), {"x": (2, 2, 10), "k": (3, 2, 4)}),
    ])
    def test_matches_central_differences(self, rng, name, fn, shapes):
        # |value| in [0.5, 1.5], random sign
        inputs = {k: rng.uniform(0.5, 1.5, s) * rng.choice([-1.0, 1.0], s) for k, s in shapes.items()}
        errors = check_gradients(fn, inputs)
        assert max(errors.values()) < 1e-4, (name, errors)

    def test_gru_step(self, rng):
        d, e = 3, 2
        inputs = {"h": rng.standard_normal((2, d)), "x": rng.standard_normal((2, e)),
                  "w_x": rng.standard_normal((e, 3 * d)), "w_h": rng.standard_normal((d, 3 * d)),
                  "b_x": rng.standard_normal(3 * d), "b_h": rng.standard_normal(3 * d)}

        def fn(t):
            params = {k: t[k] for k in ("w_x", "w_h", "b_x", "b_h")}
            return reduce_sum(gru_step(gru_step(t["h"], t["x"], params), t["x"], params))

        assert max(check_gradients(fn, inputs).values()) < 1e-4


# ===========================================================================
# Adam
# ===========================================================================

class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        params = {"p": np.array([0.0, 5.0])}
        grads = {"p": np.array([-6.0, 4.0])}
        new, state = adam_step(params, grads, AdamState(learning_rate=0.1))
        np.testing.assert_allclose(new["p"], [0.1, 4.9], atol=1e-7)
        assert state.step == 1

    def test_inputs_are_not_mutated(self):
        params = {"p": np.array([1.0])}
        state = AdamState()
        adam_step(params, {"p": np.array([2.0])}, state)
        assert params["p"][0] == 1.0 and state.step == 0 and not state.first_moment

    def test_converges_on_quadratic(self):
        params, state = {"p": np.array([0.0])}, AdamState(learning_rate=1e-2)
        for _ in range(5000):
            params, state = adam_step(params, {"p": 2 * (params["p"] - 3.0)}, state)
        assert abs(params["p"][0] - 3.0) < 1e-6

    def test_second_moment_non_negative(self, rng):
        params, state = {"w": rng.standard_normal((3, 2))}, AdamState()
        for _ in range(5):
            params, state = adam_step(params, {"w": rng.standard_normal((3, 2))}, state)
        assert np.all(state.second_moment["w"] >= 0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step({"p": np.zeros(3)}, {"p": np.zeros(2)}, AdamState())
