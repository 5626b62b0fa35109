"""Appearance-Preserving Module against a per-pixel brute-force oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ap3d.apm import (
    APM,
    ApmConfig,
    affinity,
    apm_forward,
    contrastive_attention,
    export_heatmap,
    reconstruct,
    shift_frames,
    similarity_heatmap,
)
from ap3d.imageio import read_pgm
from ap3d.tensorcore import Tensor, backward

from oracles import brute_force_apm, conv_matrix, identity_embedding


def _random_apm(rng, channels, divisor, ca=True, scale=4.0):
    apm = APM(channels, ApmConfig(scale_s=scale, embed_divisor=divisor, use_contrastive_attention=ca), rng=rng)
    apm.w.weight.data[...] = rng.standard_normal(apm.w.weight.shape)
    return apm


class TestBruteForceOracle:
    @pytest.mark.parametrize("fixture", range(20))
    def test_apm_forward_matches_double_loop(self, fixture):
        rng = np.random.default_rng(fixture)
        ca = fixture % 2 == 0
        s = [1.0, 4.0, 7.5][fixture % 3]
        apm = _random_apm(rng, 4, 2, ca=ca, scale=s)
        central = rng.uniform(-1, 1, (4, 6, 8))
        adjacent = rng.uniform(-1, 1, (4, 6, 8))
        z = apm_forward(central, adjacent, apm).data
        np.testing.assert_allclose(z, brute_force_apm(central, adjacent, apm, s, ca), atol=1e-6)

    def test_batched_equals_unbatched(self, rng):
        apm = _random_apm(rng, 8, 4)
        c, x = rng.standard_normal((3, 8, 4, 5)), rng.standard_normal((3, 8, 4, 5))
        batched = apm_forward(c, x, apm).data
        for b in range(3):
            np.testing.assert_allclose(batched[b], apm_forward(c[b], x[b], apm).data, atol=1e-12)

    def test_gate_matches_per_pixel_formula(self, rng):
        apm = _random_apm(rng, 8, 4)
        c, y = rng.standard_normal((8, 3, 4)), rng.standard_normal((8, 3, 4))
        mask = contrastive_attention(c, y, apm).data
        th, ph, wv = conv_matrix(apm.theta), conv_matrix(apm.phi), conv_matrix(apm.w)[0]
        for i in range(3):
            for j in range(4):
                expect = 1 / (1 + np.exp(-(wv @ ((th @ c[:, i, j]) * (ph @ y[:, i, j])))))
                assert abs(mask[0, i, j] - expect) < 1e-7


class TestAffinity:
    def test_identical_embeddings_give_s(self, rng):
        apm = APM(4, ApmConfig(embed_divisor=1), rng=rng)
        c = rng.standard_normal((4, 1, 1))
        assert affinity(c, c, apm).data.item() == pytest.approx(4.0, abs=1e-12)

    def test_orthogonal_embeddings_give_zero(self, rng):
        apm = APM(2, ApmConfig(embed_divisor=1), rng=rng)
        identity_embedding(apm)
        a = affinity(np.array([1.0, 0.0]).reshape(2, 1, 1), np.array([0.0, 3.0]).reshape(2, 1, 1), apm)
        assert a.data.item() == 0.0

    def test_single_pixel_scalar_cosine(self, rng):
        apm = APM(6, ApmConfig(embed_divisor=2, scale_s=3.0), rng=rng)
        c, x = rng.standard_normal((6, 1, 1)), rng.standard_normal((6, 1, 1))
        gc, gx = conv_matrix(apm.g) @ c.ravel(), conv_matrix(apm.g) @ x.ravel()
        expect = 3.0 * gc @ gx / np.linalg.norm(gc) / np.linalg.norm(gx)
        assert affinity(c, x, apm).data.item() == pytest.approx(expect, abs=1e-7)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 20.0), st.floats(0.01, 100.0))
    def test_bounded_and_scale_invariant(self, seed, s, k):
        rng = np.random.default_rng(seed)
        apm = APM(8, ApmConfig(embed_divisor=2, scale_s=s), rng=rng)
        c, x = rng.standard_normal((8, 3, 3)), rng.standard_normal((8, 3, 3))
        a = affinity(c, x, apm).data
        assert np.all(np.abs(a) <= s + 1e-9)
        # g is linear, so scaling the inputs scales the embeddings
        np.testing.assert_allclose(affinity(k * c, k * x, apm).data, a, atol=1e-9)

    def test_shape_mismatch(self, rng):
        apm = APM(4, rng=rng)
        with pytest.raises(ValueError):
            affinity(np.zeros((4, 3, 3)), np.zeros((4, 3, 2)), apm)
        with pytest.raises(ValueError):
            affinity(np.zeros((5, 3, 3)), np.zeros((5, 3, 3)), apm)


class TestRegistration:
    def test_two_position_tanh_closed_form(self):
        apm = APM(1, ApmConfig(embed_divisor=1))
        identity_embedding(apm)
        central = np.array([1.0, 1.0]).reshape(1, 1, 2)
        adjacent = np.array([1.0, -1.0]).reshape(1, 1, 2)
        for s in (0.5, 1.0, 4.0):
            y = reconstruct(central, adjacent, apm, scale=s).data
            assert y[0, 0, 0] == pytest.approx(np.tanh(s), abs=1e-12)
        assert reconstruct(central, adjacent, apm, scale=4.0).data[0, 0, 0] == pytest.approx(0.9993293, abs=1e-7)

    def test_zero_adjacent_gives_zero(self, rng):
        apm = _random_apm(rng, 8, 4)
        z = apm_forward(rng.standard_normal((8, 4, 4)), np.zeros((8, 4, 4)), apm).data
        assert np.all(z == 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_permutation_recovery(self, seed):
        rng = np.random.default_rng(seed)
        apm = APM(32, ApmConfig(embed_divisor=1, scale_s=50.0, use_contrastive_attention=False), rng=rng)
        identity_embedding(apm)
        central = rng.standard_normal((32, 4, 5))
        # distinct means separated in embedding space, not merely unequal
        unit = central.reshape(32, -1) / np.linalg.norm(central.reshape(32, -1), axis=0)
        cos = unit.T @ unit
        assert cos[~np.eye(20, dtype=bool)].max() <= 0.75
        perm = rng.permutation(20)
        adjacent = central.reshape(32, -1)[:, perm].reshape(32, 4, 5)
        y = reconstruct(central, adjacent, apm).data
        assert np.abs(y - central).max() < 1e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_softmax_rows_normalised_and_entropy_monotone(self, seed):
        rng = np.random.default_rng(seed)
        apm = APM(8, ApmConfig(embed_divisor=2), rng=rng)
        c, x = rng.standard_normal((8, 3, 4)), rng.standard_normal((8, 3, 4))
        entropies = []
        for s in (1.0, 2.0, 4.0, 8.0):
            hm = np.stack([similarity_heatmap(c, x, apm, (i, j), s) for i in range(3) for j in range(4)])
            np.testing.assert_allclose(hm.sum(axis=(1, 2)), 1.0, atol=1e-6)
            p = hm.reshape(12, -1)
            entropies.append(-(p * np.log(p)).sum(axis=1))
        assert np.all(np.diff(np.stack(entropies), axis=0) <= 1e-12)


class TestGateAndComposition:
    def test_zero_w_gives_half(self, rng):
        apm = APM(8, ApmConfig(embed_divisor=4), rng=rng)  # w starts at zero
        c, x = rng.standard_normal((8, 3, 3)), rng.standard_normal((8, 3, 3))
        y = reconstruct(c, x, apm).data
        np.testing.assert_array_equal(contrastive_attention(c, y, apm).data, 0.5)
        np.testing.assert_allclose(apm_forward(c, x, apm).data, 0.5 * y, atol=1e-15)

    def test_without_ca_equals_reconstruct(self, rng):
        apm = _random_apm(rng, 8, 4, ca=False)
        c, x = rng.standard_normal((8, 3, 3)), rng.standard_normal((8, 3, 3))
        np.testing.assert_array_equal(apm_forward(c, x, apm).data, reconstruct(c, x, apm).data)

    def test_saturated_gate(self, rng):
        apm = APM(4, ApmConfig(embed_divisor=1), rng=rng)
        c = np.abs(rng.standard_normal((4, 2, 2))) + 0.5
        for conv in (apm.theta, apm.phi):
            conv.weight.data[...] = np.eye(4).reshape(4, 4, 1, 1)
        apm.w.weight.data[...] = 1e3
        mask = contrastive_attention(c, c, apm).data
        np.testing.assert_allclose(mask, 1.0)

    def test_mask_in_open_unit_interval(self, rng):
        apm = _random_apm(rng, 8, 2)
        c, y = rng.standard_normal((8, 5, 5)), rng.standard_normal((8, 5, 5))
        m = contrastive_attention(c, y, apm).data
        assert np.all((m > 0) & (m < 1))

    def test_all_four_parameter_groups_get_gradients(self, rng):
        apm = _random_apm(rng, 8, 4)
        c = Tensor(rng.standard_normal((2, 8, 3, 3)))
        x = Tensor(rng.standard_normal((2, 8, 3, 3)))
        backward((apm_forward(c, x, apm) * rng.standard_normal((2, 8, 3, 3))).sum())
        for name, p in apm.named_parameters():
            assert p.grad is not None and np.abs(p.grad).max() > 0, name
        assert sorted(n for n, _ in apm.named_parameters()) == ["g.weight", "phi.weight", "theta.weight", "w.weight"]

    def test_parameter_count(self):
        apm = APM(256)
        assert apm.num_parameters() == 3 * 256 * 16 + 16


class TestConfig:
    def test_scale_must_be_positive(self):
        with pytest.raises(ValueError):
            ApmConfig(scale_s=0.0)

    @pytest.mark.parametrize("c,div,minimum,expect", [(2048, 16, 1, 128), (8, 16, 1, 1), (30, 4, 1, 7), (8, 16, 3, 3)])
    def test_embed_channels(self, c, div, minimum, expect):
        assert ApmConfig(embed_divisor=div, min_embed_channels=minimum).embed_channels(c) == expect


class TestHeatmap:
    def test_sharp_limit_is_one_hot(self, rng):
        apm = APM(16, ApmConfig(embed_divisor=1), rng=rng)
        c = rng.standard_normal((16, 4, 4))
        hm = similarity_heatmap(c, c, apm, (2, 1), scale=60.0)
        assert hm[2, 1] > 0.999

    def test_flat_limit_is_uniform(self, rng):
        apm = APM(8, ApmConfig(embed_divisor=2), rng=rng)
        c, x = rng.standard_normal((8, 3, 5)), rng.standard_normal((8, 3, 5))
        np.testing.assert_allclose(similarity_heatmap(c, x, apm, (0, 0), scale=1e-9), 1 / 15, atol=1e-9)

    def test_out_of_range_query(self, rng):
        apm = APM(4, rng=rng)
        with pytest.raises(IndexError):
            similarity_heatmap(np.ones((4, 3, 3)), np.ones((4, 3, 3)), apm, (3, 0))

    def test_export_csv_and_pgm(self, tmp_path, rng):
        apm = APM(8, ApmConfig(embed_divisor=2), rng=rng)
        hm = similarity_heatmap(rng.standard_normal((8, 3, 4)), rng.standard_normal((8, 3, 4)), apm, (1, 1))
        csv_path, pgm_path = export_heatmap(hm, tmp_path / "fig" / "hm")
        back = np.loadtxt(csv_path, delimiter=",")
        np.testing.assert_allclose(back, hm, rtol=1e-9)
        img = read_pgm(pgm_path)
        assert img.shape == (3, 4) and img.max() == 255


class TestShiftFrames:
    def test_zero_fill_both_directions(self):
        x = Tensor(np.arange(1.0, 5.0).reshape(1, 1, 4, 1, 1))
        np.testing.assert_array_equal(shift_frames(x, 1).data.ravel(), [2, 3, 4, 0])
        np.testing.assert_array_equal(shift_frames(x, -1).data.ravel(), [0, 1, 2, 3])
        np.testing.assert_array_equal(shift_frames(x, 5).data.ravel(), [0, 0, 0, 0])
