"""Dual context module: per-area encoding, descriptors, global broadcast."""

import numpy as np
import pytest

import hsiseg.autodiff as ad
from hsiseg.autodiff import Tensor
from hsiseg.cluster import AreaAssignment, make_grid
from hsiseg.dcm import DualContextModule
from hsiseg.errors import ConfigError


def _manual_assignment(labels, num_areas, h, w):
    """Area structure built directly from a label vector (bypasses clustering)."""
    layout = make_grid(h, w, num_areas)
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_areas)
    return AreaAssignment(
        affinity=Tensor(np.zeros((h * w, num_areas))),
        labels=labels, counts=counts,
        centers=Tensor(np.zeros((num_areas, 1))), layout=layout)


def _block(rng, channels=6, areas=4, iters=2, heads=2, **kw):
    return DualContextModule(channels, areas, iterations=iters, heads=heads,
                             rng=rng, dtype=np.float64, **kw)


class TestStructuralIdentity:
    def test_zero_projections_reduce_to_concat(self):
        rng = np.random.default_rng(0)
        block = _block(rng)
        block.zero_output_projections()
        f = Tensor(rng.standard_normal((6, 8, 8)))
        out, _ = block(f)
        pos = block.pos_map(f).data
        expected = np.concatenate([f.data, f.data + pos], axis=0)
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_output_channel_count_doubles(self):
        rng = np.random.default_rng(1)
        block = _block(rng)
        assert block.out_channels == 12
        out, _ = block(Tensor(rng.standard_normal((6, 8, 8))))
        assert out.shape == (12, 8, 8)


class TestStreamFlags:
    def test_regional_only(self):
        rng = np.random.default_rng(2)
        block = _block(rng, use_global=False)
        assert block.out_channels == 12
        out, _ = block(Tensor(rng.standard_normal((6, 8, 8))))
        assert out.shape == (12, 8, 8)

    def test_global_without_regional(self):
        rng = np.random.default_rng(3)
        block = _block(rng, use_regional=False)
        assert block.out_channels == 12
        out, _ = block(Tensor(rng.standard_normal((6, 8, 8))))
        assert out.shape == (12, 8, 8)

    def test_context_only(self):
        rng = np.random.default_rng(4)
        block = _block(rng, use_input=False)
        assert block.out_channels == 6

    def test_input_only_is_identity(self):
        rng = np.random.default_rng(5)
        block = _block(rng, use_regional=False, use_global=False)
        f = Tensor(rng.standard_normal((6, 8, 8)))
        out, _ = block(f)
        np.testing.assert_array_equal(out.data, f.data)

    def test_all_disabled_rejected(self):
        with pytest.raises(ConfigError):
            _block(np.random.default_rng(6), use_input=False,
                   use_regional=False, use_global=False)


class TestRegionalEncoding:
    def test_single_area_equals_full_image_pass(self):
        rng = np.random.default_rng(7)
        block = _block(rng, channels=4, areas=4)
        tokens = Tensor(rng.standard_normal((16, 4)))
        pos = Tensor(rng.standard_normal((16, 4)))
        areas = _manual_assignment(np.zeros(16, dtype=int), 4, 4, 4)
        out = block.encode_regions(tokens, pos, areas)
        full = block.region_encoder(tokens, pos=pos)
        np.testing.assert_allclose(out.data, full.data, atol=1e-12)

    def test_two_areas_match_separate_passes(self):
        rng = np.random.default_rng(8)
        block = _block(rng, channels=4, areas=4)
        tokens = rng.standard_normal((16, 4))
        pos = rng.standard_normal((16, 4))
        labels = np.array([0] * 7 + [3] * 9)
        areas = _manual_assignment(labels, 4, 4, 4)
        out = block.encode_regions(Tensor(tokens), Tensor(pos), areas).data
        for area in (0, 3):
            idx = np.nonzero(labels == area)[0]
            manual = block.region_encoder(Tensor(tokens[idx]), pos=Tensor(pos[idx]))
            np.testing.assert_allclose(out[idx], manual.data, atol=1e-12)

    def test_scatter_gather_round_trip(self):
        """Restitched rows land exactly where their pixels came from."""
        rng = np.random.default_rng(9)
        block = _block(rng, channels=4, areas=4)
        block.region_encoder.zero_output_projections()
        tokens = rng.standard_normal((16, 4))
        pos = np.zeros((16, 4))
        labels = rng.integers(0, 4, 16)
        areas = _manual_assignment(labels, 4, 4, 4)
        out = block.encode_regions(Tensor(tokens), Tensor(pos), areas)
        np.testing.assert_allclose(out.data, tokens)

    def test_single_pixel_area_handled(self):
        rng = np.random.default_rng(10)
        block = _block(rng, channels=4, areas=4)
        labels = np.array([1] + [0] * 15)
        areas = _manual_assignment(labels, 4, 4, 4)
        out = block.encode_regions(Tensor(rng.standard_normal((16, 4))),
                                   Tensor(rng.standard_normal((16, 4))), areas)
        assert np.all(np.isfinite(out.data))


class TestDescriptors:
    def test_uniform_area_value(self):
        rng = np.random.default_rng(11)
        block = _block(rng, channels=4, areas=4)
        tokens = np.ones((16, 4)) * 2.5
        areas = _manual_assignment(rng.integers(0, 4, 16), 4, 4, 4)
        summaries, valid = block.build_descriptors(Tensor(tokens), areas)
        np.testing.assert_allclose(summaries.data[valid], 2.5)

    def test_pairwise_mean(self):
        block = _block(np.random.default_rng(12), channels=2, areas=4, heads=1)
        tokens = np.array([[1.0, 0.0], [3.0, 0.0]] + [[0.0, 0.0]] * 14)
        labels = np.array([2, 2] + [0] * 14)
        areas = _manual_assignment(labels, 4, 4, 4)
        summaries, _ = block.build_descriptors(Tensor(tokens), areas)
        np.testing.assert_allclose(summaries.data[2], [2.0, 0.0])

    def test_mass_conservation(self):
        """sum_i n_i v_i equals the total token mass."""
        rng = np.random.default_rng(13)
        block = _block(rng, channels=6, areas=4)
        tokens = rng.standard_normal((36, 6))
        areas = _manual_assignment(rng.integers(0, 4, 36), 4, 6, 6)
        summaries, _ = block.build_descriptors(Tensor(tokens), areas)
        weighted = (areas.counts[:, None] * summaries.data).sum(axis=0)
        np.testing.assert_allclose(weighted, tokens.sum(axis=0), atol=1e-5)

    def test_empty_area_masked(self):
        rng = np.random.default_rng(14)
        block = _block(rng, channels=4, areas=4)
        labels = np.zeros(16, dtype=int)  # areas 1..3 empty
        areas = _manual_assignment(labels, 4, 4, 4)
        summaries, valid = block.build_descriptors(
            Tensor(rng.standard_normal((16, 4))), areas)
        np.testing.assert_array_equal(valid, [True, False, False, False])
        np.testing.assert_array_equal(summaries.data[1:], 0.0)


class TestForward:
    def test_deterministic(self):
        rng = np.random.default_rng(15)
        block = _block(rng)
        f = rng.standard_normal((6, 8, 8))
        a, _ = block(Tensor(f))
        b, _ = block(Tensor(f))
        assert a.data.tobytes() == b.data.tobytes()

    def test_gradient_check_through_block(self):
        rng = np.random.default_rng(16)
        block = _block(rng, channels=4, areas=4, iters=2)
        w = Tensor(rng.standard_normal((8, 6, 6)))

        def f(x):
            out, _ = block(x)
            return (out * w).sum()

        err = ad.grad_check(f, Tensor(rng.standard_normal((4, 6, 6))))
        assert err < 1e-4

    def test_areas_returned_cover_map(self):
        rng = np.random.default_rng(17)
        block = _block(rng)
        _, areas = block(Tensor(rng.standard_normal((6, 8, 8))))
        assert areas.counts.sum() == 64
