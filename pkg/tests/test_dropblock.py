"""Mask sampling, drop-rate calibration, renormalization, equivalence."""

import numpy as np
import pytest

from helpers import check_gradients
from mcblock.dropblock import (
    DropBlockConfig,
    apply_dropout,
    apply_mask,
    expected_drop_fraction,
    gamma_from_drop_prob,
    mask_from_seeds,
    sample_dropout_mask,
    sample_mask,
    weight_space_equivalence,
)
from mcblock.errors import ConfigError, ConstructionError, ContractError
from mcblock.rng import Rng
from mcblock.tensor import Tensor, tsum


def empirical_drop(p, block, h, w, n=10_000, seed=0):
    cfg = DropBlockConfig(block_size=block, p=p, mode="training")
    rng = Rng(seed)
    fractions = [
        1.0 - (m := sample_mask(h, w, cfg, rng.split(i))).retained / m.total
        for i in range(n)
    ]
    return float(np.mean(fractions))


class TestGamma:
    def test_p_zero_gives_gamma_zero(self):
        assert gamma_from_drop_prob(0.0, 3, 14, 14) == 0.0

    def test_block_one_degenerates_to_dropout(self):
        assert gamma_from_drop_prob(0.1, 1, 9, 9) == pytest.approx(0.1, abs=1e-9)

    def test_solver_hits_expected_fraction(self):
        for p in (0.1, 0.2, 0.3):
            for block in (3, 5, 7):
                g = gamma_from_drop_prob(p, block, 14, 14)
                assert 0.0 < g < 1.0
                assert expected_drop_fraction(g, block, 14, 14) == pytest.approx(
                    p, abs=1e-6
                )

    def test_monte_carlo_drop_rate_block7(self):
        # frozen oracle: 10k sampled masks, empirical dropped fraction vs p
        assert abs(empirical_drop(0.1, 7, 14, 14) - 0.1) < 0.02

    def test_block_larger_than_map_rejected(self):
        with pytest.raises(ConfigError):
            gamma_from_drop_prob(0.1, 9, 8, 8)

    def test_p_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            gamma_from_drop_prob(1.0, 3, 14, 14)


class TestSampleMask:
    def test_gamma_zero_is_identity(self):
        cfg = DropBlockConfig(block_size=3, p=0.0, mode="inference")
        m = sample_mask(8, 8, cfg, Rng(0))
        assert m.retained == m.total == 64
        assert (m.mask == 1.0).all()

    def test_single_center_seed_geometry(self):
        mask = mask_from_seeds(7, 7, 3, [(3, 3)])
        assert mask.sum() == 49 - 9
        assert (mask[2:5, 2:5] == 0.0).all()

    def test_drop_rate_calibration_block3(self):
        assert abs(empirical_drop(0.2, 3, 14, 14, seed=1) - 0.2) < 0.02

    def test_drop_rate_grid(self):
        for i, (p, block) in enumerate(
            [(0.1, 3), (0.1, 5), (0.2, 3), (0.2, 5), (0.3, 3), (0.3, 5)]
        ):
            assert abs(empirical_drop(p, block, 14, 14, n=4000, seed=10 + i) - p) < 0.02

    def test_blocks_reconstruct_from_seeds(self):
        cfg = DropBlockConfig(block_size=5, p=0.3, mode="training")
        rng = Rng(3)
        for i in range(200):
            m = sample_mask(14, 14, cfg, rng.split(i))
            rebuilt = mask_from_seeds(14, 14, m.block_size, m.seeds)
            assert (m.mask == rebuilt).all()
            assert m.retained + (m.total - m.retained) == m.total
            # each seed zeroes a full block^2 cells (wrapped at borders)
            for ci, cj in m.seeds:
                rows = (np.arange(ci - 2, ci + 3)) % 14
                cols = (np.arange(cj - 2, cj + 3)) % 14
                assert (m.mask[np.ix_(rows, cols)] == 0.0).all()

    def test_retained_always_positive(self):
        cfg = DropBlockConfig(block_size=7, p=0.9, mode="training")
        rng = Rng(5)
        for i in range(300):
            assert sample_mask(7, 7, cfg, rng.split(i)).retained > 0

    def test_disabled_mode_rejected(self):
        cfg = DropBlockConfig(block_size=3, p=0.1, mode="disabled")
        with pytest.raises(ContractError):
            sample_mask(8, 8, cfg, Rng(0))

    def test_training_and_inference_share_distribution(self):
        a = sample_mask(10, 10, DropBlockConfig(3, 0.3, "training"), Rng(7))
        b = sample_mask(10, 10, DropBlockConfig(3, 0.3, "inference"), Rng(7))
        assert (a.mask == b.mask).all() and a.gamma == b.gamma

    def test_even_block_rejected(self):
        with pytest.raises(ConfigError):
            sample_mask(8, 8, DropBlockConfig(4, 0.1, "training"), Rng(0))


class TestApplyMask:
    def test_all_ones_identity(self):
        cfg = DropBlockConfig(block_size=3, p=0.0, mode="inference")
        m = sample_mask(6, 6, cfg, Rng(0))
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 6, 6)))
        out = apply_mask(x, m)
        np.testing.assert_array_equal(out.data, x.data)

    def test_half_masked_constant_rescales_to_two(self):
        cfg = DropBlockConfig(block_size=1, p=0.5, mode="training")
        m = sample_mask(4, 4, cfg, Rng(1))
        m.mask = np.kron(np.eye(2), np.ones((2, 2))).astype(np.float32)
        m.retained, m.total = 8, 16
        out = apply_mask(Tensor(np.ones((1, 1, 4, 4))), m)
        kept = out.data[0, 0][m.mask == 1.0]
        np.testing.assert_allclose(kept, 2.0)
        assert (out.data[0, 0][m.mask == 0.0] == 0.0).all()

    def test_unbiased_on_constant_features(self):
        cfg = DropBlockConfig(block_size=3, p=0.15, mode="inference")
        rng = Rng(2)
        acc = np.zeros((10, 10))
        acc2 = np.zeros((10, 10))
        n = 10_000
        x = Tensor(np.ones((1, 1, 10, 10)))
        for i in range(n):
            m = sample_mask(10, 10, cfg, rng.split(i))
            out = apply_mask(x, m).data[0, 0]
            acc += out
            acc2 += out * out
        mean = acc / n
        stderr = np.sqrt(np.maximum(acc2 / n - mean**2, 1e-12) / n)
        assert (np.abs(mean - 1.0) <= 3.0 * stderr + 1e-3).all()

    def test_shape_mismatch(self):
        cfg = DropBlockConfig(block_size=3, p=0.1, mode="training")
        m = sample_mask(6, 6, cfg, Rng(0))
        with pytest.raises(ContractError):
            apply_mask(Tensor(np.ones((1, 1, 8, 8))), m)

    def test_gradient_masked_and_scaled(self):
        cfg = DropBlockConfig(block_size=3, p=0.4, mode="training")
        m = sample_mask(8, 8, cfg, Rng(4))
        x = Tensor(np.ones((1, 2, 8, 8)), requires_grad=True)
        tsum(apply_mask(x, m)).backward()
        expect = m.mask * np.float32(m.scale)
        np.testing.assert_allclose(x.grad[0, 0], expect)
        np.testing.assert_allclose(x.grad[0, 1], expect)

    def test_gradient_vs_finite_differences(self):
        cfg = DropBlockConfig(block_size=3, p=0.3, mode="training")
        for seed in range(10):
            m = sample_mask(6, 6, cfg, Rng(40 + seed))
            x = np.random.default_rng(seed).uniform(-1, 1, (1, 2, 6, 6))
            check_gradients(lambda t: apply_mask(t, m), [x], seed=seed)


class TestDropoutMask:
    def test_p_zero_keeps_all(self):
        m = sample_dropout_mask(16, 0.0, Rng(0))
        assert (m.z == 1.0).all()

    def test_kept_fraction(self):
        rng = Rng(1)
        kept = np.mean([sample_dropout_mask(64, 0.3, rng.split(i)).z.mean()
                        for i in range(10_000)])
        assert abs(kept - 0.7) < 0.02

    def test_unbiased_on_constant_features(self):
        rng = Rng(2)
        x = Tensor(np.ones((1, 32, 2, 2)))
        n = 10_000
        samples = np.stack([
            apply_dropout(x, sample_dropout_mask(32, 0.5, rng.split(i))).data[0, :, 0, 0]
            for i in range(n)
        ])
        mean = samples.mean(axis=0)
        stderr = samples.std(axis=0) / np.sqrt(n)
        assert (np.abs(mean - 1.0) <= 3.0 * stderr).all()


class TestWeightSpaceEquivalence:
    def test_no_dropped_blocks_is_plain_conv(self):
        f = Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 1, 6, 6)))
        k = Tensor(np.random.default_rng(1).uniform(-1, 1, (1, 1, 2, 2)))
        a, b = weight_space_equivalence(f, k, set())
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)
        assert a.data.shape == (1, 1, 3, 3)

    def test_all_blocks_dropped_is_zero(self):
        f = Tensor(np.random.default_rng(2).uniform(-1, 1, (1, 1, 4, 4)))
        k = Tensor(np.random.default_rng(3).uniform(-1, 1, (1, 1, 2, 2)))
        dropped = {(i, j) for i in range(2) for j in range(2)}
        a, b = weight_space_equivalence(f, k, dropped)
        assert (a.data == 0.0).all() and (b.data == 0.0).all()

    def test_single_dropped_block_matches_direct_conv(self):
        rng = np.random.default_rng(4)
        f = rng.uniform(-1, 1, (1, 1, 4, 4)).astype(np.float32)
        k = rng.uniform(-1, 1, (1, 1, 2, 2)).astype(np.float32)
        a, b = weight_space_equivalence(Tensor(f), Tensor(k), {(0, 0)})
        assert a.data[0, 0, 0, 0] == 0.0 and b.data[0, 0, 0, 0] == 0.0
        # remaining outputs equal the unmasked stride-2 conv
        from helpers import conv2d_oracle

        plain = conv2d_oracle(f, k, stride=2, padding=0)
        for i, j in [(0, 1), (1, 0), (1, 1)]:
            assert abs(a.data[0, 0, i, j] - plain[0, 0, i, j]) < 1e-6
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)

    def test_hundred_random_instances(self):
        rng = np.random.default_rng(5)
        pairs = [(4, 2), (6, 2), (6, 3), (8, 2)]
        for trial in range(100):
            kk, ll = pairs[trial % len(pairs)]
            f = rng.uniform(-1, 1, (1, 1, kk, kk)).astype(np.float32)
            k = rng.uniform(-1, 1, (1, 1, ll, ll)).astype(np.float32)
            nb = kk // ll
            n_drop = rng.integers(0, nb * nb + 1)
            flat = rng.choice(nb * nb, size=n_drop, replace=False)
            dropped = {(int(v) // nb, int(v) % nb) for v in flat}
            a, b = weight_space_equivalence(Tensor(f), Tensor(k), dropped)
            np.testing.assert_allclose(a.data, b.data, atol=1e-6)

    def test_indivisible_sizes_rejected(self):
        with pytest.raises(ConstructionError):
            weight_space_equivalence(
                Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 2, 2))), set()
            )
