import numpy as np
import pytest
from pydantic import ValidationError

from histoage.imaging.augment import (
    TRANSFORMS,
    AugmentPolicy,
    apply_view,
    augment_pair,
    center_crop,
    color_transforms,
    draw_view_params,
    geometric_transforms,
    rotate,
)
from histoage.synth.slides import gen_slide
from histoage.utils.rng import Xoshiro256StarStar, derive_seed

DRAWS = 10_000


@pytest.fixture(scope="module")
def drawn():
    policy = AugmentPolicy()
    views = {"v1": [], "v2": []}
    for i in range(DRAWS):
        rng = Xoshiro256StarStar(derive_seed(0, i))
        views["v1"].append(draw_view_params(rng, policy, "v1", 256))
        views["v2"].append(draw_view_params(rng, policy, "v2", 256))
    return views


@pytest.mark.parametrize("view", ["v1", "v2"])
def test_application_rate(drawn, view):
    for name in TRANSFORMS:
        rate = np.mean([p.applied[name] for p in drawn[view]])
        assert abs(rate - 0.75) <= 0.02, f"{view} {name}: {rate:.4f}"


def test_view_signs_hold_on_every_draw(drawn):
    for p1, p2 in zip(drawn["v1"], drawn["v2"]):
        assert p1.contrast >= 0 and p1.saturation >= 0 and p1.hue > 0
        assert p2.contrast <= 0 and p2.saturation <= 0 and p2.hue < 0
        assert -90.0 <= p1.rotation_deg < 0.0
        assert 0.0 < p2.rotation_deg <= 180.0
        assert (p1.flip_axis, p2.flip_axis) == (0, 1)
        assert -0.75 <= p1.brightness <= 0.75


def test_crop_offsets_stay_inside(drawn):
    for p in drawn["v1"] + drawn["v2"]:
        row, col = p.crop_offset
        assert 0 <= row <= 32 and 0 <= col <= 32


def test_pairs_are_reproducible(rng):
    image = rng.integers(0, 256, size=(256, 256, 3), dtype=np.uint8)
    first = augment_pair(image, AugmentPolicy(), seed=42, patch_id="P00001-1_S1_000_000")
    second = augment_pair(image, AugmentPolicy(), seed=42, patch_id="P00001-1_S1_000_000")
    other = augment_pair(image, AugmentPolicy(), seed=42, patch_id="P00001-1_S1_000_001")
    assert np.array_equal(first.v1, second.v1) and np.array_equal(first.v2, second.v2)
    assert first.seed != other.seed
    assert first.v1.shape == (224, 224, 3) and first.v1.dtype == np.float32
    assert 0.0 <= first.v1.min() and first.v1.max() <= 1.0


def test_disabled_transform_never_applies():
    policy = AugmentPolicy(disabled="rotation,hue")
    for i in range(200):
        rng = Xoshiro256StarStar(i)
        params = draw_view_params(rng, policy, "v2", 256)
        assert not params.applied["rotation"] and not params.applied["hue"]


def test_probability_bounds():
    never = AugmentPolicy(p=0.0)
    always = AugmentPolicy(p=1.0)
    rng = Xoshiro256StarStar(1)
    assert not any(draw_view_params(rng, never, "v1", 256).applied.values())
    assert all(draw_view_params(rng, always, "v1", 256).applied.values())


def test_policy_validation():
    with pytest.raises(ValidationError):
        AugmentPolicy(disabled=["blur"])
    with pytest.raises(ValidationError):
        AugmentPolicy(p=1.5)


def test_draw_rejects_small_source():
    with pytest.raises(ValueError):
        draw_view_params(Xoshiro256StarStar(0), AugmentPolicy(), "v1", 200)
    with pytest.raises(ValueError):
        draw_view_params(Xoshiro256StarStar(0), AugmentPolicy(), "v3", 256)


def test_quarter_turns_are_exact(rng):
    image = rng.random((8, 8, 3)).astype(np.float32)
    assert np.array_equal(rotate(image, 90.0), np.rot90(image, 1))
    assert np.array_equal(rotate(image, -90.0), np.rot90(image, 3))
    assert np.array_equal(rotate(image, 360.0), image)


def test_oblique_rotation_round_trip_keeps_texture():
    slide, _ = gen_slide("P00042", 45.0, seed=2, size=512)
    image = slide.pixels[128:384, 128:384].astype(np.float32) / 255.0
    restored = rotate(rotate(image, 37.0), -37.0)
    # pixels that never left the frame during either turn
    rows, cols = np.mgrid[:256, :256]
    inside = np.hypot(rows - 127.5, cols - 127.5) < 0.45 * 256
    mse = float(np.mean((restored[inside] - image[inside]) ** 2))
    assert 10.0 * np.log10(1.0 / mse) > 25.0


def test_colour_transforms(rng):
    image = rng.uniform(0.2, 0.8, size=(16, 16, 3)).astype(np.float32)
    np.testing.assert_allclose(color_transforms(image, brightness=0.1), image + 0.1, atol=1e-6)
    assert color_transforms(image, brightness=0.9).max() == 1.0
    np.testing.assert_allclose(color_transforms(image, contrast=0.0), image, atol=1e-6)
    flat = color_transforms(image, contrast=-1.0)
    np.testing.assert_allclose(flat, np.full_like(image, image.mean()), atol=1e-6)
    np.testing.assert_allclose(color_transforms(image, hue=1.0), image, atol=1e-5)
    grey = color_transforms(image, saturation=-1.0)
    np.testing.assert_allclose(grey[..., 0], grey[..., 1], atol=1e-6)


def test_unapplied_view_is_a_plain_crop(rng):
    image = rng.random((256, 256, 3)).astype(np.float32)
    params = draw_view_params(Xoshiro256StarStar(3), AugmentPolicy(p=0.0), "v1", 256)
    np.testing.assert_array_equal(apply_view(image, params), image[:224, :224])
    assert center_crop(image).shape == (224, 224, 3)


def test_flip_then_rotate(rng):
    image = rng.random((6, 6, 3)).astype(np.float32)
    out = geometric_transforms(image, rotation=90.0, flip_axis=1)
    np.testing.assert_array_equal(out, np.rot90(image[:, ::-1], 1))
    np.testing.assert_array_equal(geometric_transforms(image), image)
    with pytest.raises(ValueError):
        geometric_transforms(np.zeros((4, 6, 3), np.float32), rotation=10.0)
