"""Autodiff primitives, softmax variants, incremental Cholesky, and the
finite-difference checker."""

import math

import numpy as np
import pytest

from bundlegen import numerics as nm
from bundlegen.numerics import (
    Adam,
    AllMasked,
    SingularKernel,
    Tensor,
    backward,
    empty_cholesky,
    grad_check,
    logdet_extend,
    masked_softmax,
    no_grad,
    softmax,
)


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        W = np.ones((7, 3))
        p = softmax(np.array([0.2, -0.1, 0.4]), W)
        np.testing.assert_allclose(p, np.full(7, 1 / 7), atol=1e-12)
        assert abs(p.sum() - 1.0) < 1e-9

    def test_direct_evaluation_matches(self):
        rng = np.random.default_rng(0)
        h = rng.normal(size=4)
        W = rng.normal(size=(5, 4))
        z = W @ h
        want = np.exp(z) / np.exp(z).sum()
        np.testing.assert_allclose(softmax(h, W), want, atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        h = rng.normal(size=3)
        W = rng.normal(size=(6, 3))
        shifted = masked_softmax(h, W, np.full(6, -7.5))  # constant mask = shift
        np.testing.assert_allclose(softmax(h, W), shifted, atol=1e-9)

    def test_extreme_logits_stable(self):
        W = np.array([[1.0], [0.0]])
        p = softmax(np.array([800.0]), W)
        np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-12)


class TestMaskedSoftmax:
    def test_zero_mask_is_identity(self):
        rng = np.random.default_rng(2)
        h = rng.normal(size=4)
        E = rng.normal(size=(6, 4))
        np.testing.assert_allclose(
            masked_softmax(h, E, np.zeros(6)), softmax(h, E), atol=1e-12)

    def test_infinite_mask_forces_exact_zero(self):
        rng = np.random.default_rng(3)
        h = rng.normal(size=4)
        E = rng.normal(size=(6, 4))
        m = np.zeros(6)
        m[2] = np.inf
        p = masked_softmax(h, E, m)
        assert p[2] == 0.0
        assert abs(p.sum() - 1.0) < 1e-9

    def test_log2_mask_halves_unnormalized_weight(self):
        rng = np.random.default_rng(4)
        h = rng.normal(size=4)
        E = rng.normal(size=(5, 4))
        m = np.zeros(5)
        m[1] = math.log(2.0)
        base = np.exp(E @ h)
        masked = base.copy()
        masked[1] /= 2.0
        np.testing.assert_allclose(
            masked_softmax(h, E, m), masked / masked.sum(), atol=1e-12)

    def test_all_masked_raises(self):
        with pytest.raises(AllMasked):
            masked_softmax(np.ones(2), np.ones((3, 2)), np.full(3, np.inf))

    def test_finite_mask_equals_softmax_of_shifted_logits(self):
        rng = np.random.default_rng(5)
        h = rng.normal(size=3)
        E = rng.normal(size=(6, 3))
        m = rng.uniform(0, 4, size=6)
        z = E @ h - m
        want = np.exp(z - z.max())
        want /= want.sum()
        np.testing.assert_allclose(masked_softmax(h, E, m), want, atol=1e-12)


class TestLogdetExtend:
    def test_empty_plus_unit_diag(self):
        state, logdet = logdet_extend(empty_cholesky(), np.zeros(0), 1.0)
        assert logdet == pytest.approx(0.0)
        assert state.size == 1

    def test_two_by_two_jaccard_kernel(self):
        state, _ = logdet_extend(empty_cholesky(), np.zeros(0), 1.0)
        _, logdet = logdet_extend(state, np.array([1 / 3]), 1.0)
        assert logdet == pytest.approx(math.log(8 / 9), abs=1e-12)

    def test_matches_dense_oracle_on_random_psd(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            k = int(rng.integers(2, 13))
            A = rng.normal(size=(k, k + 2))
            S = A @ A.T
            d = np.sqrt(np.diag(S))
            S = S / d[:, None] / d[None, :]
            state = empty_cholesky()
            for i in range(k):
                state, logdet = logdet_extend(state, S[i, :i], float(S[i, i]))
            assert logdet == pytest.approx(np.linalg.slogdet(S)[1], abs=1e-8)
            assert state.log_det == pytest.approx(2 * np.log(np.diag(state.chol)).sum())

    def test_duplicate_row_jitters_and_flags(self):
        state, _ = logdet_extend(empty_cholesky(), np.zeros(0), 1.0)
        new, logdet = logdet_extend(state, np.array([1.0]), 1.0)
        assert new.jittered
        assert logdet < -15  # log of the jitter

    def test_indefinite_extension_raises(self):
        state, _ = logdet_extend(empty_cholesky(), np.zeros(0), 1.0)
        with pytest.raises(SingularKernel):
            logdet_extend(state, np.array([2.0]), 1.0)  # Schur = 1 - 4 < 0


class TestAutodiff:
    def test_square_gradient(self):
        x = Tensor(3.0, requires_grad=True)
        err = grad_check(lambda ps: nm.mul(ps[0], ps[0]), [x], h=1e-4)
        assert err < 1e-6
        nm.zero_grads([x])
        backward(nm.mul(x, x))
        assert x.grad == pytest.approx(6.0)

    def test_constant_function_zero_gradients(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        err = grad_check(lambda ps: nm.sumt(nm.mul(ps[0], 0.0)), [x], h=1e-4)
        assert err == 0.0

    @pytest.mark.parametrize("op_name", [
        "einsum", "take_rows", "gather_cols", "concat", "tanh", "sigmoid",
        "relu_smooth", "log_softmax", "softmaxt", "sum_axis", "max_axis",
        "unfold", "reshape", "index_last", "broadcast_add",
    ])
    def test_primitive_gradients(self, op_name):
        rng = np.random.default_rng(hash(op_name) % 2**32)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        v = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        w = Tensor(rng.uniform(0.5, 1.5, size=(3, 4)), requires_grad=True)
        row = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
        mult = rng.normal(size=(3, 4))
        idx = np.array([0, 2, 1])
        funcs = {
            "einsum": (lambda ps: nm.sumt(nm.tanh(nm.einsum2("ij,jk->ik", ps[0], ps[1]))), [a, b]),
            "take_rows": (lambda ps: nm.sumt(nm.mul(nm.take_rows(ps[0], np.array([[0, 1], [2, 2]])), 1.5)), [a]),
            "gather_cols": (lambda ps: nm.sumt(nm.gather_cols(ps[0], idx)), [a]),
            "concat": (lambda ps: nm.sumt(nm.tanh(nm.concat([ps[0], ps[0]], axis=-1))), [a]),
            "tanh": (lambda ps: nm.sumt(nm.tanh(ps[0])), [a]),
            "sigmoid": (lambda ps: nm.sumt(nm.sigmoid(ps[0])), [a]),
            "relu_smooth": (lambda ps: nm.sumt(nm.relu(ps[0])), [w]),  # positive inputs avoid the kink
            "log_softmax": (lambda ps: nm.sumt(nm.mul(nm.log_softmax(ps[0]), mult)), [a]),
            "softmaxt": (lambda ps: nm.sumt(nm.mul(nm.softmaxt(ps[0]), mult)), [a]),
            "sum_axis": (lambda ps: nm.sumt(nm.tanh(nm.sumt(ps[0], axis=1))), [v]),
            "max_axis": (lambda ps: nm.sumt(nm.maxt(ps[0], axis=1)), [v]),
            "unfold": (lambda ps: nm.sumt(nm.tanh(nm.unfold_windows(ps[0], 2))), [v]),
            "reshape": (lambda ps: nm.sumt(nm.tanh(nm.reshape(ps[0], (4, 3)))), [a]),
            "index_last": (lambda ps: nm.sumt(nm.index_last(ps[0], 1)), [v]),
            "broadcast_add": (lambda ps: nm.sumt(nm.tanh(nm.add(ps[0], ps[1]))), [a, row]),
        }
        f, params = funcs[op_name]
        assert grad_check(f, params, h=1e-5) < 1e-4

    def test_backward_requires_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            backward(nm.mul(x, 2.0))

    def test_no_grad_builds_no_graph(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = nm.sumt(nm.tanh(x))
        assert not y.requires_grad
        assert y._backward_fn is None

    def test_shared_node_gradient_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = nm.add(nm.mul(x, x), nm.mul(x, 3.0))  # x^2 + 3x
        backward(y)
        assert x.grad == pytest.approx(7.0)


class TestAdam:
    def test_quadratic_descent(self):
        x = Tensor(np.array([4.0, -3.0]), requires_grad=True)
        opt = Adam({"x": x}, lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            backward(nm.sumt(nm.mul(x, x)))
            opt.step()
        np.testing.assert_allclose(x.data, 0.0, atol=1e-3)

    def test_zero_lr_keeps_params(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = Adam({"x": x}, lr=0.0)
        opt.zero_grad()
        backward(nm.sumt(nm.mul(x, x)))
        opt.step()
        np.testing.assert_array_equal(x.data, [1.0, 2.0])
