"""Mask generation: complementarity, exact occlusion counts, distribution."""

import numpy as np
import pytest

from gaitgl import masks
from gaitgl.autodiff import Tensor
from gaitgl.errors import ConfigurationError, DimensionError
from gaitgl.masks import MaskStrategy, generate


def occluded_count(kind, d, h, w):
    if kind in (masks.PART_H, masks.STRIP_H):
        return int(d * h) * w
    if kind in (masks.PART_V, masks.STRIP_V):
        return h * int(d * w)
    return int(d * h * w)


class TestGenerate:
    def test_part_h_known_draw(self):
        # Force r = 1 by finding a seed; contract: k contiguous all-one rows.
        for seed in range(50):
            rng = np.random.default_rng(seed)
            pair = generate(MaskStrategy(masks.PART_H, 0.5), 4, 2, rng)
            rows = np.flatnonzero(pair.p.all(axis=1))
            if rows.tolist() == [1, 2]:
                break
        else:
            pytest.fail("no seed produced r=1")
        assert pair.q[1:3].sum() == 0
        np.testing.assert_array_equal(pair.p + pair.q, np.ones((4, 2)))

    def test_pixel_exact_count(self):
        rng = np.random.default_rng(0)
        pair = generate(MaskStrategy(masks.PIXEL, 0.25), 4, 4, rng)
        assert pair.p.sum() == 4

    @pytest.mark.parametrize("kind", masks.RANDOM_KINDS)
    def test_complementarity_and_counts_1000_draws(self, kind):
        h, w, d = 16, 11, 0.3
        rng = np.random.default_rng(123)
        want = occluded_count(kind, d, h, w)
        for _ in range(1000):
            pair = generate(MaskStrategy(kind, d), h, w, rng)
            assert pair.p.sum() == want
            np.testing.assert_array_equal(pair.p + pair.q, np.ones((h, w)))

    def test_part_masks_are_contiguous(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            pair = generate(MaskStrategy(masks.PART_H, 0.4), 10, 6, rng)
            rows = np.flatnonzero(pair.p.any(axis=1))
            assert rows.tolist() == list(range(rows[0], rows[0] + len(rows)))
            pair = generate(MaskStrategy(masks.PART_V, 0.4), 10, 6, rng)
            cols = np.flatnonzero(pair.p.any(axis=0))
            assert cols.tolist() == list(range(cols[0], cols[0] + len(cols)))

    def test_strip_v_uniform_chi_square(self):
        # 1000 draws at d=0.3 on 64x44: always floor(0.3*44)=13 columns, and
        # the pooled column histogram passes chi-square at alpha=0.01
        # (critical value chi2.ppf(0.99, df=43) = 67.459, frozen via scipy).
        h, w, d = 64, 44, 0.3
        rng = np.random.default_rng(777)
        counts = np.zeros(w)
        for _ in range(1000):
            pair = generate(MaskStrategy(masks.STRIP_V, d), h, w, rng)
            cols = pair.p[0]
            assert cols.sum() == 13
            counts += cols
        expected = counts.sum() / w
        stat = ((counts - expected) ** 2 / expected).sum()
        assert stat < 67.459

    def test_same_seed_identical(self):
        a = generate(MaskStrategy(masks.PIXEL, 0.3), 8, 8, np.random.default_rng(9))
        b = generate(MaskStrategy(masks.PIXEL, 0.3), 8, 8, np.random.default_rng(9))
        np.testing.assert_array_equal(a.p, b.p)
        np.testing.assert_array_equal(a.q, b.q)

    def test_degenerate_ratio_gives_no_mask(self):
        rng = np.random.default_rng(1)
        pair = generate(MaskStrategy(masks.PART_H, 0.05), 4, 4, rng)
        assert pair.p.sum() == 0
        assert pair.q.sum() == 16

    def test_no_mask_pair(self):
        pair = generate(MaskStrategy(masks.NO_MASK), 3, 5, np.random.default_rng(0))
        assert pair.p.sum() == 0 and pair.q.sum() == 15

    def test_fixed_part_two_way_split(self):
        pair = generate(MaskStrategy(masks.FIXED_PART, n=2), 6, 4, np.random.default_rng(0))
        assert pair.p[:3].all() and not pair.p[3:].any()
        np.testing.assert_array_equal(pair.p + pair.q, np.ones((6, 4)))

    def test_fixed_part_requires_divisibility(self):
        with pytest.raises(DimensionError):
            generate(MaskStrategy(masks.FIXED_PART, n=4), 6, 4, np.random.default_rng(0))

    def test_bad_strategy_rejected(self):
        with pytest.raises(ConfigurationError):
            MaskStrategy("diagonal", 0.3)
        with pytest.raises(ConfigurationError):
            MaskStrategy(masks.PART_H, 1.0)


class TestApply:
    def test_ones_mask_identity(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((1, 2, 3, 4, 4)))
        y = masks.apply(x, np.ones((4, 4)))
        np.testing.assert_array_equal(y.data, x.data)

    def test_zeros_mask_annihilates(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((1, 2, 3, 4, 4)))
        y = masks.apply(x, np.zeros((4, 4)))
        assert not y.data.any()

    def test_pair_application_sums_to_input(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((2, 3, 4, 8, 6)))
        for kind in masks.RANDOM_KINDS:
            pair = generate(MaskStrategy(kind, 0.4), 8, 6, rng)
            total = masks.apply(x, pair.p).data + masks.apply(x, pair.q).data
            np.testing.assert_allclose(total, x.data)

    def test_extent_mismatch(self):
        x = Tensor(np.zeros((1, 1, 1, 4, 4)))
        with pytest.raises(DimensionError):
            masks.apply(x, np.ones((3, 4)))


class TestPartitionFixed:
    def test_single_part_is_identity(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((1, 2, 3, 4, 4)))
        parts = masks.partition_fixed(x, 1)
        assert len(parts) == 1
        np.testing.assert_array_equal(parts[0].data, x.data)

    def test_two_parts_rows(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 1, 4, 4))
        top, bottom = masks.partition_fixed(x, 2)
        np.testing.assert_array_equal(top.data, x.data[:, :, :, :2])
        np.testing.assert_array_equal(bottom.data, x.data[:, :, :, 2:])

    def test_reconcatenation_identity(self):
        from gaitgl import autodiff as ad
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((2, 2, 2, 6, 5)))
        parts = masks.partition_fixed(x, 3)
        y = ad.concat(parts, 3)
        np.testing.assert_array_equal(y.data, x.data)

    def test_non_divisible_rejected(self):
        x = Tensor(np.zeros((1, 1, 1, 4, 4)))
        with pytest.raises(DimensionError):
            masks.partition_fixed(x, 3)
