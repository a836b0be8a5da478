import numpy as np
import pytest

from dcsreid import tensor as T
from dcsreid.attention import (
    AttentionBlock,
    AttentionConfig,
    binarize_mask,
    dcs_attention,
    gumbel_noise,
    linear_anneal,
    masked_affinity,
    nonlocal_attention,
    sample_soft_mask,
    vanilla_attention,
)
from dcsreid.exceptions import DimensionError, ParameterError


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class TestVanilla:
    def test_single_token_returns_value(self):
        v = np.array([[0.3, -1.2]])
        out = vanilla_attention(np.array([[5.0, 1.0]]), np.array([[2.0, 2.0]]), v)
        np.testing.assert_array_equal(out.data, v)

    def test_zero_query_key_gives_column_mean(self):
        v = np.random.default_rng(0).normal(size=(4, 3))
        out = vanilla_attention(np.zeros((4, 3)), np.zeros((4, 3)), v)
        np.testing.assert_allclose(out.data, np.tile(v.mean(0), (4, 1)), atol=1e-15)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        q, k, v = (rng.normal(size=(3, 2)) for _ in range(3))
        expected = np.zeros((3, 2))
        for i in range(3):
            scores = [sum(q[i, d] * k[j, d] for d in range(2)) / np.sqrt(2) for j in range(3)]
            w = np.exp(scores) / np.sum(np.exp(scores))
            expected[i] = sum(w[j] * v[j] for j in range(3))
        np.testing.assert_allclose(vanilla_attention(q, k, v).data, expected, rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            vanilla_attention(np.zeros((3, 2)), np.zeros((3, 3)), np.zeros((3, 2)))


class TestNonLocal:
    def test_single_token(self):
        x = np.array([[1.0, 2.0, -1.0]])
        out = nonlocal_attention(x)
        np.testing.assert_allclose(out.data, (x @ x.T) @ x)
        np.testing.assert_allclose(out.data, 6.0 * x)

    def test_zeros(self):
        np.testing.assert_array_equal(nonlocal_attention(np.zeros((3, 2))).data, 0.0)

    def test_triple_loop_oracle(self):
        x = np.random.default_rng(2).normal(size=(4, 3))
        n, c = x.shape
        expected = np.zeros_like(x)
        for i in range(n):
            for j in range(n):
                a_ij = sum(x[i, d] * x[j, d] for d in range(c)) / n
                for d in range(c):
                    expected[i, d] += a_ij * x[j, d]
        np.testing.assert_allclose(nonlocal_attention(x).data, expected, rtol=1e-12)


class TestSoftMask:
    def test_zero_logits_half(self):
        out = sample_soft_mask(np.zeros((3, 4)), tau=0.7, inference=True)
        np.testing.assert_array_equal(out.data, 0.5)

    def test_saturation(self):
        out = sample_soft_mask(np.full((2, 2), 10.0), tau=1.0, inference=True)
        assert np.all(out.data > 0.9999)

    def test_sharpening_limit(self):
        out = sample_soft_mask(np.array([[0.3]]), tau=0.01, inference=True)
        # sigmoid(30) = 1 - 9.36e-14
        assert out.data[0, 0] > 1 - 1e-12

    def test_nonpositive_tau(self):
        with pytest.raises(ParameterError):
            sample_soft_mask(np.zeros((1, 1)), tau=0.0, inference=True)

    def test_training_noise_is_gumbel_difference(self):
        # difference of two standard Gumbels is standard logistic: P(> 0) = 1/2, var = pi^2/3
        rng = np.random.default_rng(0)
        d = gumbel_noise(rng, 200_000) - gumbel_noise(rng, 200_000)
        assert abs(d.mean()) < 0.02
        assert abs(d.var() - np.pi ** 2 / 3) < 0.05

    def test_training_mode_is_stochastic_and_seeded(self):
        theta = np.zeros((4, 4))
        a = sample_soft_mask(theta, 1.0, np.random.default_rng(5)).data
        b = sample_soft_mask(theta, 1.0, np.random.default_rng(5)).data
        c = sample_soft_mask(theta, 1.0, np.random.default_rng(6)).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    @pytest.mark.parametrize("theta", [-1.3, -0.2, 0.05, 2.0])
    def test_monotone_saturation_in_inverse_tau(self, theta):
        taus = [5.0, 2.0, 1.0, 0.5, 0.1, 0.05]
        dist = [abs(sample_soft_mask(np.array([[theta]]), t, inference=True).data[0, 0] - 0.5) for t in taus]
        assert all(b >= a for a, b in zip(dist, dist[1:]))


class TestBinarize:
    def test_threshold_strict(self):
        dm = binarize_mask(np.array([[0.6, 0.4, 0.5]]))
        np.testing.assert_array_equal(dm.hard, [[1.0, 0.0, 0.0]])

    def test_all_high(self):
        dm = binarize_mask(np.full((2, 3), 0.9))
        np.testing.assert_array_equal(dm.hard, 1.0)

    def test_straight_through_gradient_equals_soft_path(self):
        rng = np.random.default_rng(3)
        theta0 = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        tau = 0.8

        def loss_of_mask(m):
            return ((m * w) ** 2).sum() + (m * w).sum()

        theta = T.parameter(theta0)
        dm = binarize_mask(sample_soft_mask(theta, tau, inference=True), tau)
        T.backward(loss_of_mask(dm.mask))

        soft0 = T.sigmoid_array(theta0 / tau)
        hard0 = (soft0 > 0.5).astype(float)

        def soft_path(th):
            # value equals the hard-forward loss at theta0; slope follows the soft mask
            m = hard0 + T.sigmoid_array(th / tau) - soft0
            return float(loss_of_mask(T.Tensor(m)).item())

        numeric = T.fd_gradient_oracle(soft_path, theta0)
        assert T.relative_error(theta.grad, numeric) < 1e-6


class TestDCS:
    def _config(self, c=6, n=4, **kw):
        return AttentionConfig(mode="dcs", channels=c, tokens=n, inference=True, **kw)

    def test_all_ones_mask_is_unmasked_affinity(self):
        x = np.random.default_rng(4).normal(size=(4, 6))
        block = AttentionBlock(self._config(), np.random.default_rng(0))
        out = block(x, tau=1.0, hard_override=np.ones((4, 6)))
        np.testing.assert_allclose(out.data, _softmax(x @ x.T) @ x, rtol=1e-12)

    def test_all_zero_mask_uniform(self):
        x = np.random.default_rng(5).normal(size=(4, 6))
        block = AttentionBlock(self._config(), np.random.default_rng(0))
        out = block(x, tau=1.0, hard_override=np.zeros((4, 6)))
        np.testing.assert_allclose(out.data, np.tile(x.mean(0), (4, 1)), atol=1e-14)

    def test_channel_deletion_oracle(self):
        x = np.random.default_rng(6).normal(size=(4, 6))
        mask = np.ones((4, 6))
        mask[:, [1, 4]] = 0.0
        block = AttentionBlock(self._config(), np.random.default_rng(0))
        out = block(x, tau=1.0, hard_override=mask)
        kept = np.delete(x, [1, 4], axis=1)
        np.testing.assert_allclose(out.data, _softmax(kept @ kept.T) @ x, rtol=1e-12)

    def test_functional_entry_point(self):
        x = np.random.default_rng(7).normal(size=(4, 6))
        cfg = self._config()
        out = dcs_attention(x, cfg, np.random.default_rng(1))
        assert out.shape == (4, 6)
        with pytest.raises(ParameterError):
            dcs_attention(x, AttentionConfig(mode="vanilla", channels=6), None)

    def test_channel_mismatch(self):
        block = AttentionBlock(self._config(c=5), np.random.default_rng(0))
        with pytest.raises(DimensionError):
            block(np.zeros((4, 6)), tau=1.0)

    def test_inference_repeatable(self):
        x = np.random.default_rng(8).normal(size=(2, 4, 6))
        block = AttentionBlock(self._config(), np.random.default_rng(0))
        outs = [block(x, tau=0.5, rng=np.random.default_rng(k)).data.tobytes() for k in range(10)]
        assert len(set(outs)) == 1

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 4, 6))
        block = AttentionBlock(self._config(), np.random.default_rng(0))
        batched = block(x, tau=0.5).data
        for b in range(3):
            np.testing.assert_allclose(batched[b], block(x[b], tau=0.5).data, rtol=1e-13)

    def test_qk_variant_runs_and_masks_queries_keys(self):
        x = np.random.default_rng(10).normal(size=(4, 6))
        block = AttentionBlock(self._config(qk_projection=True), np.random.default_rng(0))
        mask = np.ones((4, 6))
        mask[:, :3] = 0
        out = block(x, tau=1.0, hard_override=mask).data
        q = (x @ block.params["wq"].data) * mask
        k = (x @ block.params["wk"].data) * mask
        np.testing.assert_allclose(out, _softmax(q @ k.T) @ x, rtol=1e-12)


@pytest.mark.parametrize("mode", ["vanilla", "dcs"])
def test_affinity_rows_stochastic(mode):
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.normal(size=(5, 6)) * 3
        if mode == "vanilla":
            a = T.softmax_rows(x @ x.T / np.sqrt(6)).data
        else:
            m = (rng.random((5, 6)) > 0.5).astype(float)
            a = masked_affinity(x, m).data
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_linear_anneal():
    assert linear_anneal(0, 60, 5.0, 0.5) == 5.0
    assert linear_anneal(59, 60, 5.0, 0.5) == 0.5
    assert linear_anneal(0, 1, 5.0, 0.5) == 5.0


def test_config_validation():
    with pytest.raises(ParameterError):
        AttentionConfig(mode="sparse")
    with pytest.raises(ParameterError):
        AttentionConfig(tau_start=0.0)
