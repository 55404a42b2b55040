import numpy as np
import pytest

from docgraph import autodiff as ad
from docgraph.autodiff import AdamState, Tensor
from docgraph.embedstore import BadMagicError, TruncatedPayloadError


def kink_free(rng, shape, margin=1e-2):
    """Random values in [-1, 1] resampled until no entry sits near a relu kink."""
    while True:
        x = rng.uniform(-1.0, 1.0, shape)
        if np.abs(x).min() >= margin:
            return x.astype(np.float32)


class TestForwardOps:
    def test_relu_definition(self):
        assert np.array_equal(ad.relu(Tensor([[-1.0, 2.0]])).data, [[0.0, 2.0]])

    def test_softmax_symmetry(self):
        out = ad.softmax_rows(Tensor([[0.0, 0.0]])).data
        assert np.allclose(out, [[0.5, 0.5]])

    def test_matmul_hand_computed(self):
        a = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        b = Tensor([[1.0], [0.5], [-1.0]])
        # oracle: [[1 + 1 - 3], [4 + 2.5 - 6]]
        assert np.allclose(ad.matmul(a, b).data, [[-1.0], [0.5]])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_add_broadcasts(self):
        m = Tensor(np.zeros((2, 3)))
        row = Tensor([[1.0, 2.0, 3.0]])
        col = Tensor([[10.0], [20.0]])
        assert np.allclose(ad.add(m, row).data, [[1, 2, 3], [1, 2, 3]])
        assert np.allclose(ad.add(m, col).data, [[10, 10, 10], [20, 20, 20]])
        outer = ad.add(col, row)
        assert np.allclose(outer.data, [[11, 12, 13], [21, 22, 23]])

    def test_mean_rows(self):
        out = ad.mean_rows(Tensor([[1.0, 3.0], [3.0, 5.0]]))
        assert np.allclose(out.data, [[2.0, 4.0]])

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite_rejected(self):
        with pytest.raises(FloatingPointError):
            Tensor([[np.inf]])
        with pytest.raises(FloatingPointError):
            ad.scale(Tensor([[3e38]]), 10.0)  # float32 overflow

    def test_cross_entropy_value(self):
        logits = Tensor([[0.0, 0.0, 0.0]])
        assert ad.cross_entropy(logits, 1).item() == pytest.approx(np.log(3.0), abs=1e-6)

    def test_cross_entropy_label_range(self):
        with pytest.raises(ValueError):
            ad.cross_entropy(Tensor([[0.0, 1.0]]), 2)


class TestBackward:
    def test_linear_case_all_threes(self, rng):
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        with ad.tape() as t:
            loss = ad.sum_all(ad.scale(x, 3.0))
            ad.backward(loss, on=t)
        assert np.array_equal(x.grad, np.full((2, 3), 3.0, dtype=np.float32))

    def test_cross_entropy_grad_is_softmax_minus_onehot(self, rng):
        logits = Tensor(rng.uniform(-1, 1, (1, 4)), requires_grad=True)
        with ad.tape() as t:
            loss = ad.cross_entropy(logits, 2)
            ad.backward(loss, on=t)
        probs = np.exp(logits.data[0]) / np.exp(logits.data[0]).sum()
        expected = probs.copy()
        expected[2] -= 1.0
        assert np.allclose(logits.grad[0], expected, atol=1e-6)
        # finite-difference confirmation
        err = ad.grad_check(lambda: ad.cross_entropy(logits, 2), [logits])
        assert err <= 1e-3

    def test_grads_accumulate_until_zeroed(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        with ad.tape() as t:
            loss = ad.sum_all(x)
            ad.backward(loss, on=t)
            ad.backward(loss, on=t)
        assert np.array_equal(x.grad, np.full((2, 2), 2.0, dtype=np.float32))
        x.zero_grad()
        assert x.grad is None

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with ad.tape() as t:
            y = ad.scale(x, 2.0)
            with pytest.raises(ValueError):
                ad.backward(y, on=t)

    def test_matmul_adjoint_identities(self, rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        with ad.tape() as t:
            loss = ad.sum_all(ad.matmul(a, b))
            ad.backward(loss, on=t)
        ones = np.ones((3, 2))
        assert np.allclose(a.grad, ones @ b.data.T, atol=1e-5)  # dA = dC B^T
        assert np.allclose(b.grad, a.data.T @ ones, atol=1e-5)  # dB = A^T dC
        err = ad.grad_check(lambda: ad.sum_all(ad.matmul(a, b)), [a, b])
        assert err <= 1e-3


class TestGradCheckPerOp:
    """Every differentiable op at <= 1e-3 max relative error, kinks excluded."""

    def check(self, make_loss, params):
        err = ad.grad_check(make_loss, params, eps=1e-3)
        assert err <= 1e-3, f"max relative error {err}"

    def test_quadratic_exactness(self):
        x = Tensor([[3.0]], requires_grad=True)
        with ad.tape() as t:
            loss = ad.matmul(x, x)
            ad.backward(loss, on=t)
        assert x.grad[0, 0] == pytest.approx(6.0, abs=1e-4)
        self.check(lambda: ad.matmul(x, x), [x])

    def test_identity_closure_basis_gradient(self):
        x = Tensor([[1.0, 2.0, 3.0]], requires_grad=True)
        picker = Tensor([[1.0], [0.0], [0.0]])
        with ad.tape() as t:
            loss = ad.matmul(x, picker)
            ad.backward(loss, on=t)
        assert np.array_equal(x.grad, [[1.0, 0.0, 0.0]])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_elementwise_ops(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(kink_free(rng, (3, 4)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (4, 2)).astype(np.float32), requires_grad=True)

        def loss():
            h = ad.relu(x)
            h = ad.leaky_relu(ad.scale(h, 1.7), 0.2)
            h = ad.elu(ad.matmul(h, w))
            h = ad.softmax_rows(h)
            return ad.sum_all(ad.mean_rows(h))

        self.check(loss, [x, w])

    def test_transpose_and_add_broadcasts(self, rng):
        a = Tensor(rng.uniform(-1, 1, (3, 2)).astype(np.float32), requires_grad=True)
        row = Tensor(rng.uniform(-1, 1, (1, 3)).astype(np.float32), requires_grad=True)
        col = Tensor(rng.uniform(-1, 1, (2, 1)).astype(np.float32), requires_grad=True)

        def loss():
            t = ad.transpose(a)  # 2x3
            t = ad.add(t, row)
            t = ad.add(t, col)
            t = ad.add(col, row) and t  # outer add exercised separately below
            return ad.sum_all(t)

        self.check(loss, [a, row, col])

        def loss_outer():
            return ad.sum_all(ad.add(col, row))

        self.check(loss_outer, [row, col])

    def test_masked_softmax(self, rng):
        x = Tensor(rng.uniform(-1, 1, (3, 3)).astype(np.float32), requires_grad=True)
        mask = np.array([[True, True, False], [False, True, True], [True, True, True]])
        weights = Tensor(rng.uniform(0.5, 1.0, (3, 1)).astype(np.float32))

        def loss():
            return ad.sum_all(ad.matmul(ad.softmax_rows(x, mask=mask), weights))

        self.check(loss, [x])
        probs = ad.softmax_rows(x, mask=mask).data
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert (probs[~mask] == 0).all()

    def test_masked_softmax_empty_row_rejected(self):
        with pytest.raises(ValueError, match="empty row"):
            ad.softmax_rows(Tensor(np.ones((2, 2))), mask=np.array([[True, True], [False, False]]))

    def test_dropout_gradient(self):
        x = Tensor(np.random.default_rng(3).uniform(0.2, 1.0, (4, 4)).astype(np.float32), requires_grad=True)

        def loss():
            return ad.sum_all(ad.dropout(x, 0.5, np.random.default_rng(11)))

        self.check(loss, [x])


class TestDropout:
    def test_eval_mode_identity(self):
        x = Tensor(np.random.default_rng(0).standard_normal((5, 5)))
        out = ad.dropout(x, 1.0, np.random.default_rng(1))
        assert np.array_equal(out.data, x.data)

    def test_expectation_preserved(self):
        rng = np.random.default_rng(42)
        x = Tensor(np.full((10, 10), 2.0, dtype=np.float32))
        total = np.zeros((10, 10))
        draws = 10_000
        for _ in range(draws):
            total += ad.dropout(x, 0.8, rng).data
        assert np.abs(total / draws - 2.0).max() <= 0.04  # 2% of the value

    def test_scaling_factor(self):
        x = Tensor(np.ones((50, 50), dtype=np.float32))
        out = ad.dropout(x, 0.8, np.random.default_rng(0)).data
        values = np.unique(out)
        assert np.allclose(values, [0.0, 1.25])

    def test_bad_keep_prob(self):
        with pytest.raises(ValueError):
            ad.dropout(Tensor([[1.0]]), 0.0, 1)


class TestAdam:
    def test_first_step_is_signed_lr(self):
        # oracle: one hand-computed Adam step; bias correction makes m_hat/sqrt(v_hat)
        # equal sign(g) up to eps at t=1
        p = Tensor(np.zeros((2, 2), dtype=np.float32), requires_grad=True)
        g = np.array([[0.5, -2.0], [1.0, -0.25]], dtype=np.float32)
        state = AdamState()
        ad.adam_step([p], state, grads=[g])
        expected = -state.lr * np.sign(g)
        assert np.abs(p.data - expected).max() <= 1e-6
        assert state.t == 1

    def test_zero_grad_no_change(self):
        p = Tensor(np.full((2, 2), 7.0, dtype=np.float32), requires_grad=True)
        before = p.data.copy()
        ad.adam_step([p], AdamState(), grads=[np.zeros((2, 2), dtype=np.float32)])
        assert np.array_equal(p.data, before)

    def test_default_learning_rate(self):
        assert AdamState().lr == 0.001
        assert AdamState().beta1 == 0.9
        assert AdamState().beta2 == 0.999
        assert AdamState().eps == 1e-8

    def test_shape_mismatch(self):
        p = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            ad.adam_step([p], AdamState(), grads=[np.zeros((3, 3), dtype=np.float32)])

    def test_two_steps_hand_computed(self):
        p = Tensor(np.array([[1.0]], dtype=np.float32), requires_grad=True)
        g = np.array([[0.4]], dtype=np.float32)
        state = AdamState(lr=0.01)
        ad.adam_step([p], state, grads=[g])
        ad.adam_step([p], state, grads=[g])
        # constant gradient: m_hat = g, v_hat = g^2 at every t
        expected = 1.0 - 2 * 0.01 * (0.4 / (0.4 + 1e-8))
        assert p.data[0, 0] == pytest.approx(expected, abs=1e-5)


class TestCheckpointContainer:
    def test_round_trip(self, tmp_path):
        named = {
            "layer0.w": Tensor(np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)),
            "cls.b": np.zeros((1, 2), dtype=np.float32),
        }
        path = tmp_path / "params.dgpt"
        ad.save_params(named, path)
        loaded = ad.load_params(path)
        assert set(loaded) == {"layer0.w", "cls.b"}
        assert np.array_equal(loaded["layer0.w"], named["layer0.w"].data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "p.dgpt"
        ad.save_params({"w": np.ones((1, 1), dtype=np.float32)}, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            ad.load_params(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "p.dgpt"
        ad.save_params({"w": np.ones((4, 4), dtype=np.float32)}, path)
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(TruncatedPayloadError):
            ad.load_params(path)
