import math

import numpy as np
import pytest

import detkit.augment as aug
from detkit.augment import (
    AffineParams,
    AugPolicy,
    PoolExhaustedError,
    Sample,
    affine_to_map,
    apply_affine,
    apply_hsv_gains,
    augment_frame,
    default_policy,
    derive_seed,
    hsv_jitter,
    mixup,
    mosaic4,
    sample_affine,
    transform_boxes,
)
from detkit.imagery import AffineMap, RasterImage
from detkit.labels import NormBox
from oracles import mask_bounds, pixel_aligned_box, rasterize_box, side_errors, warp_mask_nearest
from scenes import make_scene


def scene_sample(rng, stem, size=64):
    image, boxes = make_scene(rng, size, size)
    return Sample(image, boxes, stem)


class TestPolicy:
    def test_default_values(self):
        assert default_policy().as_tuple() == (0.5, 0.4, 0.1, 0.1, 0.5, 0.015, 0.7, 0.4, 0.3, 1.0)

    def test_named_fields(self):
        p = default_policy()
        assert (p.zoom, p.hue, p.mosaic_p) == (0.5, 0.015, 1.0)

    @pytest.mark.parametrize("kw", [{"hflip_p": 1.5}, {"zoom": -0.1}, {"value": math.nan}])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            AugPolicy(**kw)


class TestSampleAffine:
    def test_zero_policy_gives_identity(self):
        for seed in range(20):
            assert sample_affine(AugPolicy.zero(), np.random.default_rng(seed)) == AffineParams()

    def test_deterministic(self):
        a = sample_affine(default_policy(), np.random.default_rng(42))
        b = sample_affine(default_policy(), np.random.default_rng(42))
        assert a == b

    def test_ranges(self):
        p = default_policy()
        rng = np.random.default_rng(0)
        draws = [sample_affine(p, rng) for _ in range(2000)]
        assert all(0.5 <= d.scale <= 1.5 for d in draws)
        assert all(abs(d.angle) <= 0.4 and abs(d.shear_x) <= 0.1 for d in draws)
        assert all(abs(d.translate_x) <= 0.1 and abs(d.translate_y) <= 0.1 for d in draws)
        flips = sum(d.flip for d in draws) / len(draws)
        assert 0.45 < flips < 0.55

    def test_derived_seed_is_stable(self):
        assert derive_seed(0, "a") == derive_seed(0, "a")
        assert derive_seed(0, "a") != derive_seed(1, "a")
        assert derive_seed(0, "a") != derive_seed(0, "b")
        assert 0 <= derive_seed(123, "x") < 2**64


class TestAffineMap:
    def test_identity(self):
        assert affine_to_map(AffineParams(), 64, 48).is_identity()

    def test_flip_mirrors(self):
        m = affine_to_map(AffineParams(flip=True), 64, 48)
        assert np.allclose(m.matrix, [[-1, 0, 63], [0, 1, 0], [0, 0, 1]])

    def test_scale_two(self):
        m = affine_to_map(AffineParams(scale=2.0), 64, 64)
        assert np.allclose(m.matrix[:2, :2], np.diag([0.5, 0.5]))
        # the center is a fixed point
        assert np.allclose(m.apply(31.5, 31.5), (31.5, 31.5))

    def test_translation_in_pixels(self):
        m = affine_to_map(AffineParams(translate_x=0.1, translate_y=-0.25), 100, 40)
        assert np.allclose(m.apply(10.0, 0.0), (0.0, 10.0))


class TestTransformBoxes:
    BOX = NormBox(0, 0.25, 0.5, 0.1, 0.2)

    def test_identity(self):
        assert transform_boxes([self.BOX], AffineMap.identity(), 64, 64) == [self.BOX]

    def test_flip(self):
        (out,) = transform_boxes([self.BOX], affine_to_map(AffineParams(flip=True), 64, 64), 64, 64)
        assert out.cx == pytest.approx(0.75, abs=1e-12)
        assert (out.cy, out.w, out.h) == pytest.approx((0.5, 0.1, 0.2), abs=1e-12)

    def test_quarter_turn(self):
        m = affine_to_map(AffineParams(angle=90.0), 100, 100)
        (out,) = transform_boxes([self.BOX], m, 100, 100)
        assert (out.cx, out.cy, out.w, out.h) == pytest.approx((0.5, 0.25, 0.2, 0.1), abs=1e-9)
        # the mask oracle agrees within a pixel per side
        mask = warp_mask_nearest(rasterize_box(self.BOX, 100, 100), _coeffs(m), 100, 100)
        _assert_bounds_close(out, mask_bounds(mask), 100, 100)

    def test_pushed_out_is_dropped(self):
        m = affine_to_map(AffineParams(translate_x=0.9), 64, 64)
        assert transform_boxes([self.BOX], m, 64, 64) == []

    def test_mostly_hidden_is_dropped(self):
        # 0.95 of the width leaves the frame, 5% of the area stays visible
        box = NormBox(0, 0.5, 0.5, 0.2, 0.2)
        m = affine_to_map(AffineParams(translate_x=0.59), 100, 100)
        assert transform_boxes([box], m, 100, 100) == []
        m = affine_to_map(AffineParams(translate_x=0.5), 100, 100)
        assert len(transform_boxes([box], m, 100, 100)) == 1

    def test_mask_oracle_200_draws(self):
        """Boxes from transform_boxes match warped box masks within one pixel per side."""
        w = h = 64
        policy = default_policy()
        rng = np.random.default_rng(2024)
        compared = 0
        for _ in range(200):
            params = sample_affine(policy, rng)
            m = affine_to_map(params, w, h)
            box = pixel_aligned_box(rng, w, h)
            out = transform_boxes([box], m, w, h)
            visible = warp_mask_nearest(rasterize_box(box, w, h), _coeffs(m), w, h)
            if not out:
                # dropped boxes keep at most a sliver on screen
                full = warp_mask_nearest(rasterize_box(box, w, h), _coeffs(m), 3 * w, 3 * h, offset=(w, h))
                assert visible.sum() <= aug.MIN_VISIBLE_FRACTION * max(full.sum(), 1) + 2 * (w + h)
                continue
            (got,) = out
            assert got.is_valid()
            bounds = mask_bounds(visible)
            if bounds is None:
                assert min(got.w * w, got.h * h) <= 1.0
                continue
            _assert_bounds_close(got, bounds, w, h)
            compared += 1
        assert compared >= 100

    def test_outputs_are_valid(self):
        rng = np.random.default_rng(5)
        policy = AugPolicy(zoom=0.9, rotation=45, translate=0.4, shear=20)
        for _ in range(300):
            m = affine_to_map(sample_affine(policy, rng), 64, 64)
            boxes = [pixel_aligned_box(rng, 64, 64) for _ in range(3)]
            for b in transform_boxes(boxes, m, 64, 64):
                assert b.is_valid(), b.problems()


def _coeffs(m):
    return (m.a, m.b, m.c, m.d, m.e, m.f)


def _assert_bounds_close(box, bounds, w, h):
    assert max(abs(s) for s in side_errors(box, bounds, w, h)) <= 1.0, (box, bounds)


class TestHsvJitter:
    def test_zero_policy_is_identity(self):
        img, _ = make_scene(np.random.default_rng(1))
        out = hsv_jitter(img, np.random.default_rng(0), AugPolicy.zero())
        assert np.abs(out.pixels.astype(int) - img.pixels.astype(int)).max() <= 1

    def test_gray_is_saturation_fixed_point(self):
        gray = RasterImage.filled(8, 8, (90, 90, 90))
        for gain in (0.3, 1.0, 1.7):
            assert apply_hsv_gains(gray, 0.0, gain, 1.0) == gray

    def test_value_clamp(self):
        out = apply_hsv_gains(RasterImage.filled(2, 2, (200, 200, 200)), 0.0, 1.0, 1.4)
        assert (out.pixels == 255).all()
        out = apply_hsv_gains(RasterImage.filled(1, 1, (200, 100, 50)), 0.0, 1.0, 1.4)
        assert out.pixels[0, 0, 0] == 255

    def test_hue_wraps(self):
        red = RasterImage.filled(1, 1, (255, 0, 0))
        assert apply_hsv_gains(red, 1.0, 1.0, 1.0) == red


class TestMixup:
    def test_endpoint(self):
        rng = np.random.default_rng(3)
        a, b = scene_sample(rng, "a"), scene_sample(rng, "b")
        out = mixup(a, b, 1.0)
        assert out.image == a.image
        assert out.boxes == a.boxes + b.boxes

    def test_black_white_half(self):
        black = Sample(RasterImage.filled(4, 4, (0, 0, 0)))
        white = Sample(RasterImage.filled(4, 4, (255, 255, 255)))
        assert (mixup(black, white, 0.5).image.pixels == 128).all()

    def test_union_count(self):
        box = NormBox(0, 0.5, 0.5, 0.1, 0.1)
        a = Sample(RasterImage.filled(4, 4, (0, 0, 0)), [box] * 2)
        b = Sample(RasterImage.filled(4, 4, (0, 0, 0)), [box] * 3)
        assert len(mixup(a, b, 0.3).boxes) == 5

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            mixup(Sample(RasterImage.filled(4, 4, (0, 0, 0))), Sample(RasterImage.filled(4, 5, (0, 0, 0))), 0.5)


class TestMosaic:
    def test_central_pivot_places_quadrants(self):
        box = NormBox(0, 0.5, 0.5, 0.2, 0.2)
        frame = Sample(RasterImage.filled(64, 64, (10, 20, 30)), [box])
        out = mosaic4([frame] * 4, pivot=(64, 64))
        centers = sorted((b.cx, b.cy) for b in out.boxes)
        assert centers == pytest.approx(sorted([(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]))
        assert all(b.w == pytest.approx(0.1) and b.h == pytest.approx(0.1) for b in out.boxes)

    def test_output_size_any_pivot(self):
        rng = np.random.default_rng(9)
        frames = [scene_sample(rng, f"s{i}", 32) for i in range(4)]
        for _ in range(20):
            out = mosaic4(frames, rng)
            assert out.image.size == (32, 32)
            assert all(b.is_valid() for b in out.boxes)
            # every surviving box comes from exactly one input box
            assert len(out.boxes) <= sum(len(f.boxes) for f in frames)

    def test_empty_labels(self):
        frames = [Sample(RasterImage.filled(16, 16, (i * 50, 0, 0))) for i in range(4)]
        assert mosaic4(frames, np.random.default_rng(0)).boxes == ()

    def test_size_mismatch(self):
        frames = [Sample(RasterImage.filled(16, 16, (0, 0, 0)))] * 3 + [Sample(RasterImage.filled(16, 8, (0, 0, 0)))]
        with pytest.raises(ValueError):
            mosaic4(frames, pivot=(16, 16))


class TestAugmentFrame:
    @pytest.fixture
    def pool(self):
        rng = np.random.default_rng(17)
        return [scene_sample(rng, f"f{i}") for i in range(6)]

    def test_zero_policy_identity(self, pool):
        out = augment_frame(pool[0], pool, AugPolicy.zero(), seed=5)
        assert out.image == pool[0].image
        assert out.boxes == pool[0].boxes

    def test_deterministic(self, pool):
        a = augment_frame(pool[1], pool, default_policy(), seed=99)
        b = augment_frame(pool[1], pool, default_policy(), seed=99)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.boxes == b.boxes

    def test_default_always_mosaics(self, pool, monkeypatch):
        calls = []
        real = aug.mosaic4

        def spy(samples, *args, **kwargs):
            calls.append([s.stem for s in samples])
            return real(samples, *args, **kwargs)

        monkeypatch.setattr(aug, "mosaic4", spy)
        for seed in range(25):
            augment_frame(pool[0], pool, default_policy(), seed)
        assert len(calls) == 25
        assert all(c[0] == "f0" and "f0" not in c[1:] for c in calls)

    def test_pool_exhausted(self, pool):
        with pytest.raises(PoolExhaustedError):
            augment_frame(pool[0], pool[:3], default_policy(), seed=1)

    def test_outputs_valid(self, pool):
        for seed in range(15):
            out = augment_frame(pool[seed % 6], pool, default_policy(), seed)
            assert out.image.size == (64, 64)
            assert all(b.is_valid() for b in out.boxes)


def test_flip_involution():
    rng = np.random.default_rng(4)
    for _ in range(10):
        s = scene_sample(rng, "x", size=int(rng.integers(8, 40)))
        twice = apply_affine(apply_affine(s, AffineParams(flip=True)), AffineParams(flip=True))
        assert twice.image == s.image
        assert len(twice.boxes) == len(s.boxes)
        for a, b in zip(twice.boxes, s.boxes):
            assert (a.cx, a.cy, a.w, a.h) == pytest.approx((b.cx, b.cy, b.w, b.h), abs=1e-12)
