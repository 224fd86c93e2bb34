import numpy as np
import pytest

from latentflow import nn
from latentflow.dit import _attn_fwd


class TestRmsNorm:
    def test_three_four_example(self):
        # RMS of (3,4) is sqrt(12.5); frozen high-precision quotients
        y, _ = nn.rmsnorm_fwd(np.array([[3.0, 4.0]]), np.ones(2), eps=1e-30)
        np.testing.assert_allclose(y[0], [0.8485281374238570, 1.1313708498984760], atol=1e-12)

    def test_zero_input(self):
        y, _ = nn.rmsnorm_fwd(np.zeros((3, 5)), np.ones(5))
        assert np.all(y == 0)

    def test_zero_gain(self):
        y, _ = nn.rmsnorm_fwd(np.random.default_rng(0).standard_normal((3, 5)), np.zeros(5))
        assert np.all(y == 0)

    def test_unit_rms_fixed_point(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 8))
        x /= np.sqrt((x**2).mean(axis=-1, keepdims=True))
        y, _ = nn.rmsnorm_fwd(x, np.ones(8), eps=1e-30)
        np.testing.assert_allclose(y, x, atol=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 8))
        y1, _ = nn.rmsnorm_fwd(x, np.ones(8), eps=1e-30)
        y2, _ = nn.rmsnorm_fwd(10.0 * x, np.ones(8), eps=1e-30)
        np.testing.assert_allclose(y1, y2, atol=1e-10)

    def test_two_head_case_matches_rowwise_oracle(self):
        # per-head QK normalization is rmsnorm applied row-wise over head dim
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 5, 6))  # (B, H, L, hd)
        g = rng.standard_normal(6)
        y, _ = nn.rmsnorm_fwd(x, g)
        for h in range(2):
            for l in range(5):
                row = x[0, h, l]
                ref = row / np.sqrt((row**2).mean() + 1e-5) * g
                np.testing.assert_allclose(y[0, h, l], ref, atol=1e-12)


class TestRope:
    def test_position_zero_identity(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 1, 3, 8))
        cos, sin = nn.rope_tables(3, 6)
        y, _ = nn.rope_fwd(x, cos, sin)
        np.testing.assert_allclose(y[:, :, 0, :], x[:, :, 0, :], atol=1e-15)

    def test_unrotated_dims_bit_identical(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 2, 7, 10))
        cos, sin = nn.rope_tables(7, 4)
        y, _ = nn.rope_fwd(x, cos, sin)
        assert np.array_equal(y[..., 4:], x[..., 4:])

    def test_pair_norms_preserved(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 2, 9, 8))
        cos, sin = nn.rope_tables(9, 8)
        y, _ = nn.rope_fwd(x, cos, sin)
        for i in range(4):
            n_in = np.hypot(x[..., 2 * i], x[..., 2 * i + 1])
            n_out = np.hypot(y[..., 2 * i], y[..., 2 * i + 1])
            np.testing.assert_allclose(n_in, n_out, atol=1e-6)

    def test_backward_is_inverse_rotation(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 1, 5, 6))
        cos, sin = nn.rope_tables(5, 6)
        y, cache = nn.rope_fwd(x, cos, sin)
        back = nn.rope_bwd(y, cache)
        np.testing.assert_allclose(back, x, atol=1e-12)


class TestMaskedAttention:
    def _qkv(self, rng, B=1, H=2, Lq=4, Lk=4, hd=5):
        return (
            rng.standard_normal((B, H, Lq, hd)),
            rng.standard_normal((B, H, Lk, hd)),
            rng.standard_normal((B, H, Lk, hd)),
        )

    def test_single_valid_key_returns_its_value(self):
        rng = np.random.default_rng(8)
        q, k, v = self._qkv(rng)
        valid = np.zeros((1, 4), dtype=bool)
        valid[0, 2] = True
        out, _ = nn.attention_fwd(q, k, v, valid, 1.0)
        for h in range(2):
            for i in range(4):
                np.testing.assert_allclose(out[0, h, i], v[0, h, 2], atol=1e-12)

    def test_all_invalid_gives_zero(self):
        rng = np.random.default_rng(9)
        q, k, v = self._qkv(rng)
        out, _ = nn.attention_fwd(q, k, v, np.zeros((1, 4), dtype=bool), 1.0)
        assert np.all(out == 0)

    def test_masked_equals_dense_on_truncated(self):
        rng = np.random.default_rng(10)
        q, k, v = self._qkv(rng, Lq=3, Lk=6)
        valid = np.zeros((1, 6), dtype=bool)
        valid[0, :4] = True
        out, _ = nn.attention_fwd(q, k, v, valid, 0.7)
        # dense small-case oracle on the unpadded prefix
        scores = np.einsum("bhid,bhjd->bhij", q, k[:, :, :4]) * 0.7
        e = np.exp(scores - scores.max(-1, keepdims=True))
        probs = e / e.sum(-1, keepdims=True)
        ref = np.einsum("bhij,bhjd->bhid", probs, v[:, :, :4])
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_differential_shared_qk_exactly_zero(self):
        # second map with identical projections cancels the first exactly
        rng = np.random.default_rng(11)
        d, td = 8, 8
        params = {
            "a.wq": rng.standard_normal((d, d)),
            "a.wk": rng.standard_normal((d, d)),
            "a.wv": rng.standard_normal((d, d)),
            "a.wo": rng.standard_normal((d, d)),
            "a.qnorm.g": np.ones(4),
            "a.knorm.g": np.ones(4),
        }
        params["a.wq2"] = params["a.wq"].copy()
        params["a.wk2"] = params["a.wk"].copy()

        class Cfg:
            n_heads = 2
            head_dim = 4

        x = rng.standard_normal((2, 5, d))
        valid = np.ones((2, 5), dtype=bool)
        cos, sin = nn.rope_tables(5, 4)
        out, _ = _attn_fwd(params, "a", x, x, valid, (cos, sin), Cfg)
        assert np.all(out == 0.0)


class TestSwiGLU:
    def test_zero_weights_zero_output(self):
        x = np.random.default_rng(12).standard_normal((3, 4))
        y, _ = nn.swiglu_fwd(x, np.zeros((4, 8)), np.zeros((4, 8)), np.zeros((8, 4)))
        assert np.all(y == 0)

    def test_zero_gate_preactivation(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((3, 4))
        wa = rng.standard_normal((4, 8))
        wo = rng.standard_normal((8, 4))
        y, _ = nn.swiglu_fwd(x, wa, np.zeros((4, 8)), wo)  # SiLU(0) = 0
        assert np.all(y == 0)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((2, 3))
        wa = rng.standard_normal((3, 5))
        wg = rng.standard_normal((3, 5))
        wo = rng.standard_normal((5, 3))
        y, _ = nn.swiglu_fwd(x, wa, wg, wo)
        # scalar-by-scalar oracle
        for r in range(2):
            hidden = []
            for j in range(5):
                a = sum(x[r, i] * wa[i, j] for i in range(3))
                u = sum(x[r, i] * wg[i, j] for i in range(3))
                hidden.append(a * (u / (1 + np.exp(-u))))
            for c in range(3):
                ref = sum(hidden[j] * wo[j, c] for j in range(5))
                assert abs(y[r, c] - ref) < 1e-12


class TestGroupNorm:
    def test_masked_matches_truncated_oracle(self):
        rng = np.random.default_rng(15)
        x = np.zeros((1, 8, 10))
        x[:, :, :6] = rng.standard_normal((1, 8, 6))
        gamma, beta = rng.standard_normal(8), rng.standard_normal(8)
        valid = np.zeros((1, 10), dtype=bool)
        valid[0, :6] = True
        y, _ = nn.groupnorm_fwd(x, gamma, beta, valid, groups=4)
        y_ref, _ = nn.groupnorm_fwd(
            x[:, :, :6], gamma, beta, np.ones((1, 6), dtype=bool), groups=4
        )
        np.testing.assert_allclose(y[:, :, :6], y_ref, atol=1e-10)
        assert np.all(y[:, :, 6:] == 0)

    def test_normalizes_per_group(self):
        rng = np.random.default_rng(16)
        x = 3.0 + 2.0 * rng.standard_normal((2, 8, 40))
        valid = np.ones((2, 40), dtype=bool)
        y, _ = nn.groupnorm_fwd(x, np.ones(8), np.zeros(8), valid, groups=2)
        yg = y.reshape(2, 2, 4, 40)
        np.testing.assert_allclose(yg.mean(axis=(2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(yg.std(axis=(2, 3)), 1.0, atol=1e-3)


class TestAdam:
    def test_converges_on_quadratic(self):
        params = {"w": np.array([5.0, -3.0])}
        opt = nn.Adam(lr=0.1)
        for _ in range(500):
            opt.step(params, {"w": 2 * params["w"]})
        assert np.abs(params["w"]).max() < 1e-3

    def test_lr_decay_shape(self):
        opt = nn.Adam(lr=1.0, decay_gamma=100.0, decay_power=0.5)
        opt.step_count = 100
        assert opt.current_lr() == pytest.approx(1.0 / np.sqrt(2.0))


class TestFourier:
    def test_shape_and_determinism(self):
        f1 = nn.fourier_features(np.array([0.3, 0.7]), 32)
        f2 = nn.fourier_features(np.array([0.3, 0.7]), 32)
        assert f1.shape == (2, 32)
        np.testing.assert_array_equal(f1, f2)
