"""
augment.py
The two contrasting views of a patch. v1 gets positive colour deltas, clockwise
rotation and a vertical flip; v2 gets negative deltas, anticlockwise rotation
and a horizontal flip. Both get an independent random crop and brightness shift.

Every transform fires with probability `policy.p`. Magnitudes are drawn
uniform in [0, max] whether or not the transform fires, so the number of draws
per view is fixed and a pair is reproducible from (seed, patch id).
"""
import logging
from dataclasses import dataclass, field
from typing import Annotated

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, field_validator
from scipy import ndimage

from histoage.imaging.color import hsv_to_rgb, rgb_to_hsv
from histoage.utils.rng import Xoshiro256StarStar, derive_seed

logger = logging.getLogger(__name__)

CROP_SIZE = 224
TRANSFORMS = ("crop", "flip", "rotation", "brightness", "contrast", "saturation", "hue")


def _names(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class AugmentPolicy(BaseModel):
    model_config = ConfigDict(extra="forbid")

    p: float = Field(0.75, ge=0.0, le=1.0)
    crop_size: int = Field(CROP_SIZE, gt=0)
    brightness: float = Field(0.75, ge=0.0)
    v1_contrast: float = Field(1.9, ge=0.0)
    v1_saturation: float = Field(1.1, ge=0.0)
    v1_hue: float = Field(0.01, ge=0.0)
    v1_rotation: float = Field(90.0, ge=0.0, le=360.0)
    v2_contrast: float = Field(2.5, ge=0.0)
    v2_saturation: float = Field(0.75, ge=0.0)
    v2_hue: float = Field(0.01, ge=0.0)
    v2_rotation: float = Field(180.0, ge=0.0, le=360.0)
    disabled: Annotated[list[str], BeforeValidator(_names)] = Field(default_factory=list)

    @field_validator("disabled")
    @classmethod
    def known_transforms(cls, value):
        unknown = sorted(set(value) - set(TRANSFORMS))
        if unknown:
            raise ValueError(f"unknown transforms {unknown}; expected a subset of {list(TRANSFORMS)}")
        return value


@dataclass
class ViewParams:
    """What was drawn and what was applied for one view."""
    view: str
    applied: dict = field(default_factory=dict)
    crop_offset: tuple = (0, 0)  # (row, col)
    flip_axis: int = 0  # 0 vertical (rows reversed), 1 horizontal
    rotation_deg: float = 0.0  # positive = anticlockwise
    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    hue: float = 0.0

    def applied_deltas(self) -> dict:
        deltas = {}
        for name in ("contrast", "saturation", "hue"):
            if self.applied.get(name):
                deltas[name] = getattr(self, name)
        if self.applied.get("rotation"):
            deltas["rotation"] = self.rotation_deg
        return deltas


@dataclass
class ViewPair:
    v1: np.ndarray
    v2: np.ndarray
    seed: int
    params1: ViewParams
    params2: ViewParams


# ---------------------- Colour transforms ----------------------

def adjust_brightness(image: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(image + delta, 0.0, 1.0)


def adjust_contrast(image: np.ndarray, delta: float) -> np.ndarray:
    mean = image.mean()
    return np.clip(mean + (1.0 + delta) * (image - mean), 0.0, 1.0)


def adjust_saturation(image: np.ndarray, delta: float) -> np.ndarray:
    hsv = rgb_to_hsv(image)
    hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + delta), 0.0, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def adjust_hue(image: np.ndarray, delta: float) -> np.ndarray:
    hsv = rgb_to_hsv(image)
    hsv[..., 0] = (hsv[..., 0] + delta) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def color_transforms(image: np.ndarray, brightness: float | None = None, contrast: float | None = None,
                     saturation: float | None = None, hue: float | None = None) -> np.ndarray:
    """Apply the given colour deltas in the order brightness, contrast, saturation, hue."""
    out = np.asarray(image, dtype=np.float32)
    if brightness is not None:
        out = adjust_brightness(out, brightness)
    if contrast is not None:
        out = adjust_contrast(out, contrast)
    if saturation is not None:
        out = adjust_saturation(out, saturation)
    if hue is not None:
        out = adjust_hue(out, hue)
    return out.astype(np.float32)


# ---------------------- Geometric transforms ----------------------

def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Anticlockwise for positive degrees. Multiples of 90 are exact permutations."""
    quarters = degrees / 90.0
    if np.isclose(quarters, round(quarters), rtol=0.0, atol=1e-9):
        return np.ascontiguousarray(np.rot90(image, k=int(round(quarters)) % 4, axes=(0, 1)))
    rotated = ndimage.rotate(image, degrees, axes=(1, 0), reshape=False, order=1, mode="reflect")
    return np.clip(rotated, 0.0, 1.0).astype(image.dtype)


def flip(image: np.ndarray, axis: int) -> np.ndarray:
    return np.ascontiguousarray(np.flip(image, axis=axis))


def geometric_transforms(image: np.ndarray, rotation: float | None = None, flip_axis: int | None = None) -> np.ndarray:
    if image.shape[0] != image.shape[1]:
        raise ValueError(f"geometric transforms need a square image, got {image.shape[:2]}")
    out = image
    if flip_axis is not None:
        out = flip(out, flip_axis)
    if rotation is not None:
        out = rotate(out, rotation)
    return out


def crop(image: np.ndarray, offset: tuple, size: int = CROP_SIZE) -> np.ndarray:
    r, c = offset
    return image[r:r + size, c:c + size]


def center_crop(image: np.ndarray, size: int = CROP_SIZE) -> np.ndarray:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"cannot crop {size}x{size} from {h}x{w}")
    return crop(image, ((h - size) // 2, (w - size) // 2), size)


# ---------------------- Views ----------------------

def _fires(rng: Xoshiro256StarStar, policy: AugmentPolicy, name: str) -> bool:
    hit = rng.bernoulli(policy.p)
    return hit and name not in policy.disabled


def draw_view_params(rng: Xoshiro256StarStar, policy: AugmentPolicy, view: str, source_size: int) -> ViewParams:
    """Draw one view's transform parameters. Draw order is fixed: crop, flip, rotation, brightness, contrast, saturation, hue."""
    if view not in ("v1", "v2"):
        raise ValueError(f"view must be 'v1' or 'v2', got {view!r}")
    sign = 1.0 if view == "v1" else -1.0
    params = ViewParams(view=view, flip_axis=0 if view == "v1" else 1)
    margin = source_size - policy.crop_size
    if margin < 0:
        raise ValueError(f"source image ({source_size}) is smaller than the crop ({policy.crop_size})")

    params.applied["crop"] = _fires(rng, policy, "crop")
    row, col = rng.integers(0, margin + 1), rng.integers(0, margin + 1)
    params.crop_offset = (row, col) if params.applied["crop"] else (0, 0)

    params.applied["flip"] = _fires(rng, policy, "flip")

    params.applied["rotation"] = _fires(rng, policy, "rotation")
    max_rotation = policy.v1_rotation if view == "v1" else policy.v2_rotation
    # v1 turns clockwise (negative), v2 anticlockwise (positive)
    params.rotation_deg = -sign * rng.uniform_open_low(0.0, max_rotation)

    params.applied["brightness"] = _fires(rng, policy, "brightness")
    params.brightness = rng.uniform(-policy.brightness, policy.brightness)

    params.applied["contrast"] = _fires(rng, policy, "contrast")
    params.contrast = sign * rng.uniform(0.0, policy.v1_contrast if view == "v1" else policy.v2_contrast)

    params.applied["saturation"] = _fires(rng, policy, "saturation")
    params.saturation = sign * rng.uniform(0.0, policy.v1_saturation if view == "v1" else policy.v2_saturation)

    params.applied["hue"] = _fires(rng, policy, "hue")
    params.hue = sign * (policy.v1_hue if view == "v1" else policy.v2_hue)
    return params


def apply_view(image: np.ndarray, params: ViewParams, crop_size: int = CROP_SIZE) -> np.ndarray:
    applied = params.applied
    out = crop(image, params.crop_offset, crop_size)
    out = geometric_transforms(
        out,
        rotation=params.rotation_deg if applied.get("rotation") else None,
        flip_axis=params.flip_axis if applied.get("flip") else None,
    )
    out = color_transforms(
        out,
        brightness=params.brightness if applied.get("brightness") else None,
        contrast=params.contrast if applied.get("contrast") else None,
        saturation=params.saturation if applied.get("saturation") else None,
        hue=params.hue if applied.get("hue") else None,
    )
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)


def augment_pair(image: np.ndarray, policy: AugmentPolicy, seed: int, patch_id: str = "") -> ViewPair:
    """Two views of a stored (256x256) patch image, reproducible from (seed, patch_id)."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    pair_seed = derive_seed(seed, patch_id)
    rng = Xoshiro256StarStar(pair_seed)
    params1 = draw_view_params(rng, policy, "v1", image.shape[0])
    params2 = draw_view_params(rng, policy, "v2", image.shape[0])
    return ViewPair(
        v1=apply_view(image, params1, policy.crop_size),
        v2=apply_view(image, params2, policy.crop_size),
        seed=pair_seed,
        params1=params1,
        params2=params2,
    )
