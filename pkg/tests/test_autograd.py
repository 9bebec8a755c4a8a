import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volrep import autograd as ag
from volrep.errors import DegenerateVectorError, NumericError, ShapeMismatchError
from volrep.gradcheck import fd_check


def randt(rng, *shape):
    return ag.parameter(rng.standard_normal(shape))


class TestMatmul:
    def test_identity(self):
        a = ag.constant(np.eye(2))
        b = ag.constant([[2.0, 3.0], [4.0, 5.0]])
        assert np.array_equal((a @ b).data, b.data)

    def test_inner_product(self):
        out = ag.constant([[1.0, 2.0]]) @ ag.constant([[3.0], [4.0]])
        assert out.data.tolist() == [[11.0]]

    def test_grad_of_sum_matches_fd(self):
        a = ag.parameter([[1.0, 1.0]])
        b = ag.constant([[1.0], [1.0]])
        err = fd_check(lambda: ag.tsum(a @ b), [a], h=1e-6)
        assert err < 1e-6
        assert np.allclose(a.grad, [[1.0, 1.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(ag.constant(np.zeros((2, 3))), ag.constant(np.zeros((2, 3))))

    def test_batched_matmul_grad(self):
        rng = np.random.default_rng(0)
        a = randt(rng, 3, 2, 4)
        b = randt(rng, 3, 4, 5)
        err = fd_check(lambda: ag.tsum(ag.mul(a @ b, a.data.sum() * 0 + 1.0)), [a, b])
        assert err < 1e-6

    def test_broadcast_matmul_grad(self):
        rng = np.random.default_rng(1)
        a = randt(rng, 3, 2, 4)
        w = randt(rng, 4, 5)
        err = fd_check(lambda: ag.tsum(ag.power(a @ w, 2.0)), [a, w])
        assert err < 1e-6


class TestSoftmax:
    def test_uniform_row(self):
        out = ag.softmax_rows(ag.constant([[0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, 1.0 / 3.0)

    def test_analytic_exponentials(self):
        out = ag.softmax_rows(ag.constant([[np.log(2.0), 0.0]]))
        assert np.allclose(out.data, [[2.0 / 3.0, 1.0 / 3.0]])

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(7)
        x = randt(rng, 3, 4)
        err = fd_check(lambda: ag.tsum(ag.power(ag.softmax_rows(x), 2.0)), [x])
        assert err < 1e-6

    def test_nan_input_rejected(self):
        with pytest.raises(NumericError):
            ag.softmax_rows(ag.constant([[np.nan, 0.0]]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_rows_sum_to_one(self, m, n, seed):
        rng = np.random.default_rng(seed)
        x = ag.constant(rng.standard_normal((m, n)) * rng.uniform(0.1, 50.0))
        out = ag.softmax_rows(x)
        assert np.all(out.data >= 0)
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-9)


class TestCosine:
    def test_identical(self):
        assert ag.cosine_sim(ag.constant([1.0, 0.0]), ag.constant([1.0, 0.0])).item() == pytest.approx(1.0)

    def test_orthogonal(self):
        assert ag.cosine_sim(ag.constant([1.0, 0.0]), ag.constant([0.0, 1.0])).item() == pytest.approx(0.0)

    def test_analytic(self):
        out = ag.cosine_sim(ag.constant([1.0, 1.0]), ag.constant([1.0, 0.0]))
        assert out.item() == pytest.approx(0.70710678, abs=1e-8)

    def test_zero_norm_rejected(self):
        with pytest.raises(DegenerateVectorError):
            ag.cosine_sim(ag.constant([0.0, 0.0]), ag.constant([1.0, 0.0]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=6), st.floats(0.01, 100))
    def test_self_and_negation(self, vals, scale):
        v = np.asarray(vals) * scale
        if np.linalg.norm(v) < 1e-6:
            return
        a = ag.constant(v)
        assert ag.cosine_sim(a, a).item() == pytest.approx(1.0, abs=1e-9)
        assert ag.cosine_sim(a, ag.constant(-v)).item() == pytest.approx(-1.0, abs=1e-9)

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(3)
        a, b = randt(rng, 5), randt(rng, 5)
        err = fd_check(lambda: ag.cosine_sim(a, b), [a, b])
        assert err < 1e-6


class TestMse:
    def test_identical_tensors(self):
        x = ag.constant(np.arange(6.0).reshape(2, 3))
        assert ag.mse(x, x).item() == 0.0

    def test_analytic(self):
        assert ag.mse(ag.constant([1.0, 1.0]), ag.constant([0.0, 0.0])).item() == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            ag.mse(ag.constant([1.0]), ag.constant([[1.0]]))

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(11)
        a, b = randt(rng, 4, 3), randt(rng, 4, 3)
        err = fd_check(lambda: ag.mse(a, b), [a, b])
        assert err < 1e-6


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = ag.constant(np.zeros((2, 4)))
        assert ag.cross_entropy(logits, [0, 3]).item() == pytest.approx(np.log(4.0))

    def test_saturated_correct(self):
        logits = np.zeros((2, 5))
        logits[0, 1] = 1e6
        logits[1, 4] = 1e6
        assert ag.cross_entropy(ag.constant(logits), [1, 4]).item() == pytest.approx(0.0, abs=1e-9)

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            ag.cross_entropy(ag.constant(np.zeros((1, 3))), [3])

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(5)
        logits = randt(rng, 2, 5)
        err = fd_check(lambda: ag.cross_entropy(logits, [2, 0]), [logits])
        assert err < 1e-6


class TestBackward:
    def test_square_analytic(self):
        x = ag.parameter(3.0)
        y = ag.mul(x, x)
        y.backward()
        assert x.grad == pytest.approx(6.0)

    def test_constant_function_zero_grad(self):
        x = ag.parameter(np.array([0.3, -1.2, 2.0]))
        ag.tsum(ag.softmax(x)).backward()
        assert np.allclose(x.grad, 0.0, atol=1e-12)

    def test_second_backward_raises(self):
        x = ag.parameter(2.0)
        y = ag.mul(x, x)
        y.backward()
        with pytest.raises(RuntimeError):
            y.backward()

    def test_backward_requires_scalar(self):
        x = ag.parameter(np.ones(3))
        with pytest.raises(ShapeMismatchError):
            ag.mul(x, x).backward()

    def test_linearity(self):
        rng = np.random.default_rng(2)
        alpha, beta = 0.7, -2.3

        def build(x):
            s = ag.softmax(x)
            l1 = ag.tsum(ag.mul(s, s))
            l2 = ag.mse(x, ag.constant(np.ones_like(x.data)))
            return l1, l2

        x = randt(rng, 4)
        l1, _ = build(x)
        l1.backward()
        g1 = x.grad.copy()

        x.grad = None
        _, l2 = build(x)
        l2.backward()
        g2 = x.grad.copy()

        x.grad = None
        la, lb = build(x)
        ag.add(ag.mul(la, alpha), ag.mul(lb, beta)).backward()
        assert np.allclose(x.grad, alpha * g1 + beta * g2, atol=1e-10)

    def test_grad_populated_on_all_reachable(self):
        x = ag.parameter(np.ones(3))
        h = ag.mul(x, 2.0)
        out = ag.tsum(h)
        out.backward()
        assert h.grad is not None and x.grad is not None

    def test_accumulation_deterministic(self):
        def run():
            rng = np.random.default_rng(9)
            x = randt(rng, 6, 4)
            w = randt(rng, 4, 4)
            y = ag.tsum(ag.gelu(x @ w) @ ag.swapaxes(w, 0, 1))
            y.backward()
            return x.grad.copy(), w.grad.copy()

        (gx1, gw1), (gx2, gw2) = run(), run()
        assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


class TestFdCheck:
    def test_quadratic_nearly_exact(self):
        rng = np.random.default_rng(13)
        x = ag.parameter(rng.uniform(0.5, 2.0, 4))
        err = fd_check(lambda: ag.tsum(ag.mul(x, x)), [x], h=1e-5)
        assert err < 1e-9

    def test_frozen_params_excluded(self):
        x = ag.parameter(np.array([1.0, 2.0]))
        frozen = ag.constant(np.array([3.0, 4.0]))

        def f():
            return ag.tsum(ag.mul(x, frozen))

        err = fd_check(f, [x, frozen])
        assert err < 1e-9
        f().backward()
        assert frozen.grad is None

    def test_step_outside_range_rejected(self):
        x = ag.parameter(1.0)
        with pytest.raises(ValueError):
            fd_check(lambda: ag.mul(x, x), [x], h=1e-2)


class TestElementwiseOps:
    @pytest.mark.parametrize("name,fn", [
        ("add", lambda a, b: ag.add(a, b)),
        ("sub", lambda a, b: ag.sub(a, b)),
        ("mul", lambda a, b: ag.mul(a, b)),
        ("div", lambda a, b: ag.div(a, ag.add(ag.mul(b, b), 1.0))),
        ("matmul", lambda a, b: ag.reshape(a, (2, 6)) @ ag.reshape(b, (6, 2))),
    ])
    def test_binary_grads(self, name, fn):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        a = ag.parameter(rng.uniform(0.3, 1.5, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)))
        b = ag.parameter(rng.uniform(0.3, 1.5, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)))
        err = fd_check(lambda: ag.tsum(ag.power(fn(a, b), 2.0)), [a, b])
        assert err < 1e-6, name

    @pytest.mark.parametrize("name,fn", [
        ("neg", ag.neg),
        ("exp", ag.exp),
        ("tanh", ag.tanh),
        ("gelu", ag.gelu),
        ("relu", ag.relu),
        ("sqrt", lambda x: ag.sqrt(ag.add(ag.mul(x, x), 1.0))),
        ("log", lambda x: ag.log(ag.add(ag.mul(x, x), 1.0))),
        ("softmax", lambda x: ag.softmax(x, axis=-1)),
        ("log_softmax", lambda x: ag.log_softmax(x, axis=-1)),
        ("transpose", lambda x: ag.transpose(x)),
        ("reshape", lambda x: ag.reshape(x, (4, 3))),
        ("mean", lambda x: ag.tmean(x, axis=0, keepdims=True)),
        ("slice", lambda x: x[1:, :2]),
        ("l2_normalize", lambda x: ag.mul(ag.l2_normalize(x),
                                          ag.constant(np.arange(12.0).reshape(3, 4)))),
    ])
    def test_unary_grads(self, name, fn):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        x = ag.parameter(rng.uniform(0.3, 1.5, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)))
        err = fd_check(lambda: ag.tsum(ag.power(fn(x), 2.0)), [x])
        assert err < 1e-6, name

    def test_stack_concat_grads(self):
        rng = np.random.default_rng(21)
        parts = [randt(rng, 2, 3) for _ in range(3)]
        err = fd_check(lambda: ag.tsum(ag.power(ag.stack(parts), 2.0)), parts)
        assert err < 1e-6
        err = fd_check(lambda: ag.tsum(ag.power(ag.concat(parts, axis=1), 2.0)), parts)
        assert err < 1e-6

    def test_take_fancy_index_grad(self):
        rng = np.random.default_rng(22)
        x = randt(rng, 5, 3)
        idx = (np.array([0, 2, 2]), np.array([1, 1, 0]))
        err = fd_check(lambda: ag.tsum(ag.power(x[idx], 2.0)), [x])
        assert err < 1e-6


class TestNoGrad:
    def test_no_tape_inside_context(self):
        x = ag.parameter(np.ones(3))
        with ag.no_grad():
            y = ag.tsum(ag.mul(x, x))
        assert not y.requires_grad and y._vjp is None

    def test_restores_on_exit(self):
        with ag.no_grad():
            pass
        assert ag.is_grad_enabled()
