"""Forward values, backward rules, and tape behavior of the autodiff core."""

import math

import numpy as np
import pytest

import medcoder.autodiff as ad
from medcoder.autodiff import Tape, Tensor
from medcoder.checkpoint import load_checkpoint, save_checkpoint
from medcoder.errors import ShapeError, VocabError

from oracles import finite_difference_grads, max_relative_error


def grad_check(build, shapes, seed=0, tol=1e-5, h=1e-5, low=-1.0, high=1.0, sample=None):
    """Analytic gradients of scalar build(params) vs central differences."""
    rng = np.random.default_rng(seed)
    params = {k: ad.parameter(rng.uniform(low, high, s)) for k, s in shapes.items()}
    with Tape() as tape:
        loss = build(params)
        tape.backward(loss)
    analytic = {
        k: (p.grad if p.grad is not None else np.zeros_like(p.values)) for k, p in params.items()
    }
    numeric = finite_difference_grads(
        lambda: build(params).item(),
        {k: p.values for k, p in params.items()},
        h=h,
        sample=sample,
        rng=rng,
    )
    for k in shapes:
        err = max_relative_error(analytic[k], numeric[k])
        assert err < tol, f"{k}: rel err {err:.3g}"


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(ad.tensor(np.eye(2)), ad.tensor([[2.0, 3.0], [4.0, 5.0]]))
        np.testing.assert_array_equal(out.values, [[2.0, 3.0], [4.0, 5.0]])

    def test_hand_arithmetic(self):
        out = ad.matmul(ad.tensor([[1.0, 2.0]]), ad.tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.values, [[11.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))

    def test_grad_matches_finite_differences(self):
        grad_check(
            lambda p: ad.sum_all(ad.matmul(p["a"], p["b"])),
            {"a": (3, 4), "b": (4, 2)},
            tol=1e-6,
        )


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(ad.tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.values, [0.5, 0.5])

    def test_logit_gap(self):
        out = ad.softmax(ad.tensor([1.0, -1.0]))
        np.testing.assert_allclose(out.values, [0.8808, 0.1192], atol=1e-4)

    def test_no_overflow(self):
        out = ad.softmax(ad.tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.values))
        np.testing.assert_allclose(out.values, [1.0, 0.0], atol=1e-300)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        out = ad.softmax(ad.tensor(rng.normal(size=(5, 7))), axis=1)
        np.testing.assert_allclose(out.values.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out.values > 0) and np.all(out.values < 1)


class TestScalarExamples:
    def test_cross_entropy_uniform(self):
        loss = ad.cross_entropy(ad.tensor([0.0, 0.0]), 0)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_gelu_zero(self):
        assert ad.gelu(ad.tensor([0.0])).values[0] == 0.0

    def test_layer_norm_standardizes(self):
        x = ad.tensor([[1.0, 2.0, 3.0, 4.0]])
        out = ad.layer_norm(x, ad.tensor(np.ones(4)), ad.tensor(np.zeros(4)))
        assert out.values.mean() == pytest.approx(0.0, abs=1e-12)

    def test_embedding_lookup_out_of_range(self):
        table = ad.tensor(np.ones((3, 2)))
        with pytest.raises(VocabError):
            ad.embedding_lookup(table, np.array([0, 3]))


OP_CASES = {
    "add": (lambda p: ad.sum_all(ad.add(p["a"], p["b"])), {"a": (3, 4), "b": (3, 4)}, {}),
    "sub": (lambda p: ad.sum_all(ad.mul(ad.sub(p["a"], p["b"]), p["a"])), {"a": (3, 4), "b": (3, 4)}, {}),
    "mul": (lambda p: ad.sum_all(ad.mul(p["a"], p["b"])), {"a": (4, 2), "b": (4, 2)}, {}),
    "scale": (lambda p: ad.sum_all(ad.scale(ad.mul(p["a"], p["a"]), -2.5)), {"a": (5,)}, {}),
    "add_bias": (lambda p: ad.sum_all(ad.mul(ad.add_bias(p["x"], p["b"]), p["x"])), {"x": (3, 4), "b": (4,)}, {}),
    "transpose": (lambda p: ad.sum_all(ad.matmul(ad.transpose(p["a"]), p["a"])), {"a": (3, 4)}, {}),
    "reshape": (lambda p: ad.sum_all(ad.mul(ad.reshape(p["a"], (6,)), ad.reshape(p["a"], (6,)))), {"a": (2, 3)}, {}),
    "concat": (
        lambda p: ad.sum_all(ad.mul(ad.concat([p["a"], p["b"]], axis=0), ad.concat([p["b"], p["a"]], axis=0))),
        {"a": (2, 3), "b": (2, 3)},
        {},
    ),
    "take_column": (lambda p: ad.sum_all(ad.mul(ad.take_column(p["a"], 1), ad.take_column(p["a"], 0))), {"a": (4, 3)}, {}),
    "embedding_lookup": (
        lambda p: ad.sum_all(ad.mul(ad.embedding_lookup(p["t"], np.array([0, 2, 2])), ad.embedding_lookup(p["t"], np.array([1, 0, 2])))),
        {"t": (3, 4)},
        {},
    ),
    "sum_axis": (lambda p: ad.sum_all(ad.mul(ad.sum_axis(p["a"], 1), ad.sum_axis(p["b"], 0))), {"a": (3, 4), "b": (4, 3)}, {}),
    "mean_all": (lambda p: ad.mean_all(ad.mul(p["a"], p["a"])), {"a": (3, 5)}, {}),
    "relu": (lambda p: ad.sum_all(ad.relu(p["a"])), {"a": (4, 4)}, {"low": 0.1, "high": 1.0}),
    "relu_negative": (lambda p: ad.sum_all(ad.relu(p["a"])), {"a": (4, 4)}, {"low": -1.0, "high": -0.1}),
    "gelu": (lambda p: ad.sum_all(ad.gelu(p["a"])), {"a": (3, 4)}, {}),
    "log": (lambda p: ad.sum_all(ad.log(p["a"])), {"a": (3, 3)}, {"low": 0.2, "high": 2.0}),
    "sqrt": (lambda p: ad.sum_all(ad.sqrt(p["a"])), {"a": (3, 3)}, {"low": 0.2, "high": 2.0}),
    "arccos": (lambda p: ad.sum_all(ad.arccos(p["a"])), {"a": (3, 3)}, {"low": -0.9, "high": 0.9}),
    "clamp_inside": (lambda p: ad.sum_all(ad.clamp(p["a"], -5.0, 5.0)), {"a": (3, 3)}, {}),
    "clamp_outside": (lambda p: ad.sum_all(ad.mul(ad.clamp(p["a"], -0.5, 0.5), p["a"])), {"a": (3, 3)}, {"low": 0.6, "high": 2.0}),
    "softmax": (lambda p: ad.sum_all(ad.mul(ad.softmax(p["a"], axis=1), p["b"])), {"a": (3, 5), "b": (3, 5)}, {}),
    "layer_norm": (
        lambda p: ad.sum_all(ad.mul(ad.layer_norm(p["x"], p["g"], p["b"]), p["x"])),
        {"x": (4, 6), "g": (6,), "b": (6,)},
        {},
    ),
    "normalize_rows": (
        lambda p: ad.sum_all(ad.mul(ad.normalize_rows(p["x"]), p["y"])),
        {"x": (4, 5), "y": (4, 5)},
        {"low": 0.3, "high": 1.0},
    ),
    "cross_entropy": (
        lambda p: ad.cross_entropy(p["z"], np.array([0, 2, 1])),
        {"z": (3, 4)},
        {},
    ),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_vs_finite_differences(name):
    build, shapes, kwargs = OP_CASES[name]
    grad_check(build, shapes, **kwargs)


class TestChainRule:
    """Composed graphs against hand-derived chain-rule products."""

    def test_quadratic_chain(self):
        # loss = sum(3 * a*a): d/da = 6a
        a = ad.parameter(np.array([1.5, -2.0, 0.5]))
        with Tape() as tape:
            loss = ad.sum_all(ad.scale(ad.mul(a, a), 3.0))
            tape.backward(loss)
        np.testing.assert_allclose(a.grad, 6.0 * a.values, atol=1e-12)

    def test_relu_matmul_chain(self):
        # loss = mean(relu(A @ B)): dA = (mask / N) @ B^T
        rng = np.random.default_rng(7)
        a_val = rng.uniform(0.2, 1.0, (3, 4))
        b_val = rng.uniform(0.2, 1.0, (4, 2))
        a, b = ad.parameter(a_val), ad.parameter(b_val)
        with Tape() as tape:
            loss = ad.mean_all(ad.relu(ad.matmul(a, b)))
            tape.backward(loss)
        prod = a_val @ b_val
        mask = (prod > 0).astype(float) / prod.size
        np.testing.assert_allclose(a.grad, mask @ b_val.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a_val.T @ mask, atol=1e-12)

    def test_log_sqrt_chain(self):
        # loss = sum(log(sqrt(x))): d/dx = 1 / (2x)
        x = ad.parameter(np.array([0.5, 2.0, 4.0]))
        with Tape() as tape:
            loss = ad.sum_all(ad.log(ad.sqrt(x)))
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, 1.0 / (2.0 * x.values), atol=1e-12)


class TestTapeBehavior:
    def test_forward_deterministic(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(6, 6))
        a = ad.softmax(ad.tensor(x), axis=1).values
        b = ad.softmax(ad.tensor(x), axis=1).values
        np.testing.assert_array_equal(a, b)

    def test_no_tape_records_nothing(self):
        p = ad.parameter(np.ones((2, 2)))
        out = ad.mul(p, p)
        assert out.grad is None and p.grad is None

    def test_frozen_inputs_get_no_grad(self):
        const = ad.tensor(np.ones(3))
        p = ad.parameter(np.full(3, 2.0))
        with Tape() as tape:
            loss = ad.sum_all(ad.mul(const, p))
            tape.backward(loss)
        assert const.grad is None
        np.testing.assert_allclose(p.grad, 1.0)

    def test_shared_subexpression_accumulates(self):
        # loss = sum(x*x + x): grad = 2x + 1
        x = ad.parameter(np.array([1.0, -3.0]))
        with Tape() as tape:
            loss = ad.sum_all(ad.add(ad.mul(x, x), x))
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.values + 1)

    def test_scalar_required_for_backward(self):
        x = ad.parameter(np.ones((2, 2)))
        with Tape() as tape:
            y = ad.mul(x, x)
            with pytest.raises(ShapeError):
                tape.backward(y)

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(13)
        x = ad.tensor(rng.normal(scale=50.0, size=(8, 8)))
        for out in (
            ad.softmax(x, axis=1),
            ad.gelu(x),
            ad.layer_norm(x, ad.tensor(np.ones(8)), ad.tensor(np.zeros(8))),
            ad.cross_entropy(x, np.zeros(8, dtype=int)),
        ):
            assert np.all(np.isfinite(out.values))

    def test_tensor_invariants(self):
        t = Tensor(np.ones((2, 3)))
        assert int(np.prod(t.shape)) == t.values.size
        with Tape() as tape:
            p = ad.parameter(np.ones((2, 3)))
            loss = ad.sum_all(ad.mul(p, p))
            tape.backward(loss)
        assert p.grad.shape == p.values.shape


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        params = {
            "emb": ad.parameter(rng.normal(size=(7, 3))),
            "w": ad.parameter(rng.normal(size=(3, 3)) * 1e-17),
        }
        meta = {"config_hash": "abc123", "step": 42}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, meta)
        loaded, loaded_meta = load_checkpoint(path)
        assert loaded_meta == meta
        for name, p in params.items():
            assert loaded[name].tobytes() == p.values.tobytes()

    def test_repeated_save_byte_identical(self, tmp_path):
        params = {"w": np.arange(6.0).reshape(2, 3)}
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, params, {"step": 1})
        save_checkpoint(b, params, {"step": 1})
        assert a.read_bytes() == b.read_bytes()
