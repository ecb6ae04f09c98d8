"""Engine tests: forward values, backward sweep, finite-difference agreement."""

import math

import numpy as np
import pytest

from cmnet import autodiff as ad
from cmnet.autodiff import (
    ContractError,
    DeterminismError,
    Parameter,
    ShapeError,
    Tensor,
)


def rand_param(rng, name, shape):
    return Parameter(name, rng.uniform(-2.0, 2.0, size=shape))


class TestForwardValues:
    def test_sigmoid_at_zero(self):
        out = ad.sigmoid(Tensor([0.0]))
        np.testing.assert_allclose(out.data, [0.5])

    def test_softmax_symmetry(self):
        out = ad.softmax(Tensor([0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_matmul_small(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_allclose(out.data, [[11.0]])

    def test_softmax_is_simplex(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(-50, 50, size=(7, 9)))
        s = ad.softmax(x, axis=1).data
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)

    def test_logsumexp_overflow_safe(self):
        out = ad.logsumexp(Tensor([1000.0, 1000.0]), axis=0)
        assert abs(out.item() - (1000.0 + math.log(2.0))) < 1e-9

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.uniform(-700, 700, size=(4, 4)))
        for op in (ad.sigmoid, ad.tanh, lambda t: ad.softmax(t, axis=1), lambda t: ad.logsumexp(t, axis=1)):
            assert np.all(np.isfinite(op(x).data))


class TestBackwardBasics:
    def test_square_gradient(self):
        x = Parameter("x", [1.0, 2.0])
        loss = ad.tsum(ad.mul(x, x))
        grads = ad.gradients(loss, [x])
        np.testing.assert_allclose(grads["x"], [2.0, 4.0])

    def test_tanh_gradient_at_zero(self):
        x = Parameter("x", [0.0])
        loss = ad.tsum(ad.tanh(x))
        grads = ad.gradients(loss, [x])
        np.testing.assert_allclose(grads["x"], [1.0])

    def test_unreachable_param_gets_zeros(self):
        x = Parameter("x", [1.0, 2.0])
        other = Parameter("other", np.ones((3, 2)))
        loss = ad.tsum(x)
        grads = ad.gradients(loss, [x, other])
        np.testing.assert_allclose(grads["other"], np.zeros((3, 2)))

    def test_frozen_param_gets_zeros(self):
        x = Parameter("x", [1.0, 2.0], trainable=False)
        loss = ad.tsum(ad.mul(x, x))
        grads = ad.gradients(loss, [x])
        np.testing.assert_allclose(grads["x"], np.zeros(2))

    def test_backward_is_single_use(self):
        x = Parameter("x", [1.0])
        loss = ad.tsum(x)
        ad.backward(loss)
        with pytest.raises(ContractError):
            ad.backward(loss)

    def test_non_scalar_seed_rejected(self):
        x = Parameter("x", [1.0, 2.0])
        with pytest.raises(ContractError):
            ad.backward(ad.mul(x, x))

    def test_shared_leaf_grads_accumulate(self):
        x = Parameter("x", [3.0])
        loss = ad.tsum(ad.add(ad.mul(x, x), x))  # x^2 + x -> 2x + 1
        grads = ad.gradients(loss, [x])
        np.testing.assert_allclose(grads["x"], [7.0])

    def test_stale_grads_reset_between_tapes(self):
        x = Parameter("x", [2.0])
        ad.gradients(ad.tsum(ad.mul(x, x)), [x])
        grads = ad.gradients(ad.tsum(x), [x])
        np.testing.assert_allclose(grads["x"], [1.0])


class TestShapeErrors:
    def test_matmul_mismatch_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(1, 2\).*\(3, 1\)"):
            ad.matmul(Tensor(np.ones((1, 2))), Tensor(np.ones((3, 1))))

    def test_add_mismatch(self):
        with pytest.raises(ShapeError, match="add"):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError, match="concat"):
            ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)

    def test_dropout_mask_shape(self):
        with pytest.raises(ShapeError, match="dropout"):
            ad.dropout(Tensor(np.ones((2, 3))), np.ones((3, 2)))


def _fd_cases():
    """Each case: (name, shapes, builder(params) -> scalar Tensor)."""
    rng = np.random.default_rng(7)
    r1 = rng.uniform(-1, 1, size=(3, 4))
    r2 = rng.uniform(-1, 1, size=(4, 5))
    r3 = rng.uniform(-1, 1, size=(3, 5))
    r4 = rng.uniform(-1, 1, size=(2, 3, 4))
    ids = np.array([0, 2, 1, 2])
    rl = rng.uniform(-1, 1, size=(4, 4))
    mask = (rng.uniform(size=(3, 4)) < 0.5).astype(float) * 2.0

    return [
        ("add", [(3, 4), (3, 4)], lambda a, b: ad.tsum(ad.mul(ad.add(a, b), r1))),
        ("add_broadcast_row", [(3, 4), (4,)], lambda a, b: ad.tsum(ad.mul(ad.add(a, b), r1))),
        ("add_broadcast_col", [(3, 4), (3, 1)], lambda a, b: ad.tsum(ad.mul(ad.add(a, b), r1))),
        ("sub", [(3, 4), (3, 4)], lambda a, b: ad.tsum(ad.mul(ad.sub(a, b), r1))),
        ("neg", [(3, 4)], lambda a: ad.tsum(ad.mul(ad.neg(a), r1))),
        ("mul", [(3, 4), (3, 4)], lambda a, b: ad.tsum(ad.mul(ad.mul(a, b), r1))),
        ("mul_broadcast", [(3, 1), (1, 4)], lambda a, b: ad.tsum(ad.mul(ad.mul(a, b), r1))),
        ("matmul", [(3, 4), (4, 5)], lambda a, b: ad.tsum(ad.mul(ad.matmul(a, b), r3))),
        ("transpose", [(3, 4)], lambda a: ad.tsum(ad.mul(ad.transpose(a), r1.T))),
        ("reshape", [(3, 4)], lambda a: ad.tsum(ad.mul(ad.reshape(a, (4, 3)), r1.reshape(4, 3)))),
        ("concat0", [(3, 4), (3, 4)], lambda a, b: ad.tsum(ad.mul(ad.concat([a, b], axis=0), np.vstack([r1, r1])))),
        ("concat1", [(3, 4), (3, 4)], lambda a, b: ad.tsum(ad.mul(ad.concat([a, b], axis=1), np.hstack([r1, r1])))),
        ("stack", [(3, 4), (3, 4)], lambda a, b: ad.tsum(ad.mul(ad.stack([a, b], axis=0), np.stack([r1, r1])))),
        ("slice_rows", [(3, 4)], lambda a: ad.tsum(ad.mul(a[1:3], r1[1:3]))),
        ("slice_scalar", [(3, 4)], lambda a: a[1, 2] * 1.5),
        ("sigmoid", [(3, 4)], lambda a: ad.tsum(ad.mul(ad.sigmoid(a), r1))),
        ("tanh", [(3, 4)], lambda a: ad.tsum(ad.mul(ad.tanh(a), r1))),
        ("softmax0", [(3, 4)], lambda a: ad.tsum(ad.mul(ad.softmax(a, axis=0), r1))),
        ("softmax1", [(3, 4)], lambda a: ad.tsum(ad.mul(ad.softmax(a, axis=1), r1))),
        ("softmax3d", [(2, 3, 4)], lambda a: ad.tsum(ad.mul(ad.softmax(a, axis=0), r4))),
        ("logsumexp", [(3, 4)], lambda a: ad.tsum(ad.mul(ad.logsumexp(a, axis=1), r1[:, 0]))),
        ("logsumexp_keep", [(3, 4)], lambda a: ad.tsum(ad.mul(ad.logsumexp(a, axis=0, keepdims=True), r1[:1]))),
        ("mean", [(3, 4)], lambda a: ad.tsum(ad.mul(ad.mean(a, axis=0), r1[0]))),
        ("mean_keep", [(3, 4)], lambda a: ad.tsum(ad.mul(ad.mean(a, axis=1, keepdims=True), r1[:, :1]))),
        ("sum_axis", [(3, 4)], lambda a: ad.tsum(ad.mul(ad.tsum(a, axis=1), r1[:, 0]))),
        ("max_axis", [(3, 4)], lambda a: ad.tsum(ad.mul(ad.amax(a, axis=0), r1[0]))),
        ("max_keep", [(3, 4)], lambda a: ad.tsum(ad.mul(ad.amax(a, axis=1, keepdims=True), r1[:, :1]))),
        ("lookup", [(4, 4)], lambda a: ad.tsum(ad.mul(ad.embedding_lookup(a, ids), rl))),
        ("dropout", [(3, 4)], lambda a: ad.tsum(ad.mul(ad.dropout(a, mask), r1))),
        (
            "composite_softmax_matmul",
            [(2, 2), (2, 2)],
            lambda w, x: ad.tsum(ad.mul(ad.softmax(ad.matmul(w, x), axis=0), np.array([[0.3, -0.7], [1.1, 0.2]]))),
        ),
    ]


@pytest.mark.parametrize("name,shapes,builder", _fd_cases(), ids=[c[0] for c in _fd_cases()])
def test_op_matches_finite_differences(name, shapes, builder):
    rng = np.random.default_rng(hash(name) % 2**32)
    params = [rand_param(rng, f"p{i}", s) for i, s in enumerate(shapes)]
    err = ad.grad_check(lambda: builder(*params), params, eps=1e-5)
    assert err < 1e-6, f"{name}: max relative error {err}"


class TestGradCheck:
    def test_quadratic_is_exact_to_roundoff(self):
        rng = np.random.default_rng(3)
        x = rand_param(rng, "x", (4,))
        err = ad.grad_check(lambda: ad.tsum(ad.mul(x, x)), [x], eps=1e-5)
        assert err < 1e-8

    def test_rejects_nondeterministic_builder(self):
        rng = np.random.default_rng(4)
        x = Parameter("x", [1.0])

        def noisy():
            return ad.tsum(ad.mul(x, ad.const(rng.uniform())))

        with pytest.raises(DeterminismError):
            ad.grad_check(noisy, [x])

    def test_skips_frozen_params(self):
        frozen = Parameter("frozen", [1.0, 2.0], trainable=False)
        live = Parameter("live", [3.0])
        report = ad.grad_check_report(lambda: ad.tsum(live) + ad.tsum(frozen), [frozen, live])
        assert set(report) == {"live"}


class TestMaxTieBreak:
    def test_gradient_routes_to_first_argmax(self):
        x = Parameter("x", [2.0, 2.0, 1.0])
        loss = ad.tsum(ad.amax(x, axis=0, keepdims=True))
        grads = ad.gradients(loss, [x])
        np.testing.assert_allclose(grads["x"], [1.0, 0.0, 0.0])


class TestParameterStore:
    def test_duplicate_name_rejected(self):
        store = ad.ParameterStore()
        store.add(Parameter("w", [1.0]))
        with pytest.raises(ContractError):
            store.add(Parameter("w", [2.0]))

    def test_manifest_sorted_with_shapes(self):
        store = ad.ParameterStore()
        store.add(Parameter("b.w", np.zeros((2, 3))))
        store.add(Parameter("a.w", np.zeros(4), trainable=False))
        assert store.manifest() == [("a.w", (4,), False), ("b.w", (2, 3), True)]

    def test_state_roundtrip(self):
        store = ad.ParameterStore()
        p = store.add(Parameter("w", [1.0, 2.0]))
        state = store.state()
        p.data[:] = 0.0
        store.load_state(state)
        np.testing.assert_allclose(p.data, [1.0, 2.0])
