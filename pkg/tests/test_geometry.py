import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import brute_disk_count
from tumorforge.core_data import BinaryMask, GradeMask, MCSlice
from tumorforge.errors import DimensionMismatch, EmptyMask
from tumorforge.geometry import (
    ConcentricCircles,
    apply_mask,
    binarize,
    brain_support,
    centroid,
    mask_to_png,
    quantize_grades,
    quantize_positive_grades,
    render_circles,
    render_disk,
    simplify_to_circles,
)


def _disk_mask(cx, cy, r, size, value=1.0) -> GradeMask:
    plane = np.zeros((size, size), dtype=np.float32)
    for y in range(size):
        for x in range(size):
            if math.hypot(x - cx, y - cy) <= r:
                plane[y, x] = value
    return GradeMask(plane)


class TestBinarize:
    def test_grade_values_map_to_support(self):
        plane = np.array([[0.0, 0.5], [0.75, 1.0]], dtype=np.float32)
        out = binarize(GradeMask(plane))
        assert (out.plane == np.array([[0, 1], [1, 1]], dtype=np.float32)).all()

    def test_all_zero_stays_zero(self):
        out = binarize(np.zeros((5, 5), dtype=np.float32))
        assert out.plane.sum() == 0

    def test_raw_plane_support_count(self):
        rng = np.random.default_rng(0)
        plane = rng.uniform(0.2, 1.0, size=(12, 12)).astype(np.float32)
        plane[:4] = 0.0
        assert binarize(plane).count() == int((plane != 0).sum())

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_idempotent(self, seed):
        plane = np.random.default_rng(seed).uniform(-1, 1, size=(9, 9)).astype(np.float32)
        once = binarize(plane)
        assert (binarize(once).plane == once.plane).all()


class TestCentroid:
    def test_single_pixel(self):
        plane = np.zeros((10, 10), dtype=np.float32)
        plane[7, 3] = 1.0
        assert centroid(BinaryMask(plane)) == (3.0, 7.0)

    def test_filled_disk_recovers_center(self):
        mask = binarize(_disk_mask(50, 50, 12, 101))
        cx, cy = centroid(mask)
        assert abs(cx - 50) <= 0.5 and abs(cy - 50) <= 0.5

    def test_empty_raises(self):
        with pytest.raises(EmptyMask):
            centroid(BinaryMask(np.zeros((4, 4), dtype=np.float32)))


class TestSimplify:
    def test_uniform_grade_disk(self):
        # oracle: brute-force count of the rasterized disk
        mask = _disk_mask(50, 50, 10, 101, value=1.0)
        count = brute_disk_count(50, 50, 10, 101, 101)
        c = simplify_to_circles(mask)
        expected_r = math.sqrt(count / math.pi)
        for r in (c.r1, c.r2, c.r3):
            assert abs(r - expected_r) < 1e-9
            assert abs(r - 10) < 0.5
        assert abs(c.cx - 50) <= 0.5 and abs(c.cy - 50) <= 0.5

    def test_edema_only_area_314(self):
        plane = np.zeros((64, 64), dtype=np.float32)
        flat = plane.reshape(-1)
        flat[:314] = 0.5
        c = simplify_to_circles(GradeMask(flat.reshape(64, 64)))
        assert c.r2 == 0 and c.r3 == 0
        assert abs(c.r1 - math.sqrt(314 / math.pi)) < 1e-9
        assert abs(c.r1 - 10) < 0.01

    def test_empty_raises(self):
        with pytest.raises(EmptyMask):
            simplify_to_circles(GradeMask(np.zeros((8, 8), dtype=np.float32)))

    def test_radius_ordering_invariant(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            plane = rng.choice(
                np.array([0.0, 0.5, 0.75, 1.0], dtype=np.float32),
                size=(32, 32),
                p=[0.7, 0.1, 0.1, 0.1],
            )
            c = simplify_to_circles(GradeMask(plane))
            assert c.r1 >= c.r2 >= c.r3 >= 0


class TestRender:
    def test_zero_radii_render_empty(self):
        mask = render_circles(ConcentricCircles(32, 32, 0, 0, 0), 64, 64)
        assert mask.plane.sum() == 0
        assert render_disk(32, 32, 0, 64, 64).count() == 0

    def test_counts_match_brute_force(self):
        c = ConcentricCircles(32.0, 30.0, 10, 5, 2)
        mask = render_circles(c, 64, 64).plane
        for r, region in ((2, mask == 1.0), (5, mask >= 0.75), (10, mask >= 0.5)):
            count = int(region.sum())
            brute = brute_disk_count(32.0, 30.0, r, 64, 64)
            assert count == brute
            assert abs(count - math.pi * r * r) <= 2 * math.pi * r + 4

    def test_nesting(self):
        c = ConcentricCircles(20, 22, 12, 7, 3)
        plane = render_circles(c, 48, 48).plane
        assert ((plane == 1.0) <= (plane >= 0.75)).all()
        assert ((plane >= 0.75) <= (plane >= 0.5)).all()

    def test_round_trip_recovers_circles(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            cx, cy = rng.uniform(80, 160, size=2)
            radii = np.sort(rng.uniform(0, 40, size=3))[::-1]
            radii[0] = max(radii[0], 8.0)
            c = ConcentricCircles(cx, cy, *radii)
            back = simplify_to_circles(render_circles(c, 256, 256))
            assert abs(back.cx - c.cx) <= 1.0 and abs(back.cy - c.cy) <= 1.0
            for a, b in ((back.r1, c.r1), (back.r2, c.r2), (back.r3, c.r3)):
                assert abs(a - b) <= 1.5

    def test_area_policy_bound(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            cx, cy = rng.uniform(20, 44, size=2)
            radii = np.sort(rng.uniform(0, 10, size=3))[::-1]
            mask = render_circles(ConcentricCircles(cx, cy, *radii), 64, 64)
            if mask.is_empty():
                continue
            c = simplify_to_circles(mask)
            total = int((mask.plane > 0).sum())
            assert abs(math.pi * c.r1**2 - total) <= 2 * math.pi * c.r1 + 4

    def test_circles_validation(self):
        with pytest.raises(ValueError):
            ConcentricCircles(10, 10, 3, 5, 1)


class TestApplyMask:
    def _slice(self):
        rng = np.random.default_rng(3)
        return MCSlice(rng.uniform(0.1, 1, size=(4, 8, 8)).astype(np.float32))

    def test_all_ones_zeroes_slice(self):
        x = self._slice()
        out = apply_mask(x, BinaryMask(np.ones((8, 8), dtype=np.float32)))
        assert (out.data == 0).all()

    def test_all_zeros_is_identity(self):
        x = self._slice()
        out = apply_mask(x, BinaryMask(np.zeros((8, 8), dtype=np.float32)))
        assert (out.data == x.data).all()

    def test_half_mask(self):
        x = self._slice()
        m = np.zeros((8, 8), dtype=np.float32)
        m[:, :4] = 1.0
        out = apply_mask(x, BinaryMask(m))
        assert (out.data[:, :, :4] == 0).all()
        assert (out.data[:, :, 4:] == x.data[:, :, 4:]).all()

    def test_idempotent(self):
        x = self._slice()
        m = BinaryMask((np.random.default_rng(1).uniform(size=(8, 8)) > 0.5).astype(np.float32))
        once = apply_mask(x, m)
        twice = apply_mask(once, m)
        assert (once.data == twice.data).all()

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            apply_mask(self._slice(), BinaryMask(np.zeros((4, 4), dtype=np.float32)))


class TestQuantize:
    @pytest.mark.parametrize(
        "value,expected",
        [(0.6, 0.5), (0.63, 0.75), (0.625, 0.5), (0.2, 0.0), (0.25, 0.0), (0.875, 0.75), (0.9, 1.0)],
    )
    def test_nearest_with_downward_ties(self, value, expected):
        out = quantize_grades(np.array([[value]], dtype=np.float32))
        assert out.plane[0, 0] == np.float32(expected)

    def test_exact_grades_unchanged(self):
        plane = np.array([[0.0, 0.5], [0.75, 1.0]], dtype=np.float32)
        assert (quantize_grades(plane).plane == plane).all()

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            quantize_grades(np.array([[np.nan]], dtype=np.float32))

    def test_positive_quantizer_never_returns_zero(self):
        vals = np.linspace(-1, 2, 31).astype(np.float32)
        out = quantize_positive_grades(vals)
        assert set(np.unique(out)) <= {0.5, 0.75, 1.0}


class TestBrainSupport:
    def test_raw_uses_t1w_nonzero(self):
        data = np.zeros((4, 8, 8), dtype=np.float32)
        data[1, 2:6, 2:6] = 0.7
        out = brain_support(MCSlice(data))
        assert out.count() == 16

    def test_normalized_fills_clipped_holes(self):
        # all channels at the clip floor = background; anything else is brain
        data = np.full((4, 8, 8), -0.5, dtype=np.float32)
        data[:, 2:6, 2:6] = 1.0
        data[:, 4, 4] = -0.5  # crushed interior pixel, all channels
        out = brain_support(MCSlice(data, normalized=True))
        assert out.plane[4, 4] == 1.0
        assert out.count() == 16


def test_png_export_round_trip(tmp_path):
    from PIL import Image

    plane = np.array([[0.0, 0.5], [0.75, 1.0]], dtype=np.float32)
    path = tmp_path / "mask.png"
    mask_to_png(GradeMask(plane), path)
    back = np.asarray(Image.open(path))
    assert back.shape == (2, 2)
    assert back[0, 0] == 0 and back[1, 1] == 255
    assert back[0, 1] in (127, 128)
