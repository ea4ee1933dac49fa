"""
tiler.py
Cut whole-slide rasters into overlapping patches at two physical scales,
drop background patches by colour thresholding and box-resample what is left
to the 256x256 stored size (the 224 crop happens during augmentation).
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd
from PIL import Image

from histoage.imaging.color import rgb_to_hsv
from histoage.utils.container import read_container, write_container
from histoage.utils.errors import DataError, MissingArtifactError

logger = logging.getLogger(__name__)

# OVERLAP_PX defines the band shared by neighbouring patches at both scales.
OVERLAP_PX = 50
# STORED_SIZE defines the side of the stored (pre-crop) patch image.
STORED_SIZE = 256
# MIN_SIDE defines the smallest slide dimension that can still yield a patch.
MIN_SIDE = 224
SUPPORTED_PPI = (2140, 4280)
CM_PER_INCH = 2.54

# Patch side per scale tag and scan resolution.
PATCH_SIDES = {
    "S1": {2140: 512, 4280: 1024},
    "S2": {2140: 2048, 4280: 4096},
}

# Colour threshold for tissue pixels.
TISSUE_MIN_SATURATION = 0.15
TISSUE_MAX_VALUE = 0.92
MIN_TISSUE_FRACTION = 0.20

SIDECAR_SCHEMA = {
    "type": "object",
    "required": ["slide_id", "ppi", "subject_pid"],
    "properties": {
        "slide_id": {"type": "string", "minLength": 1},
        "ppi": {"enum": list(SUPPORTED_PPI)},
        "subject_pid": {"type": "string", "minLength": 1},
    },
}

PATCH_STACK_MAGIC = b"PCH1"
MANIFEST_COLUMNS = ["slide_id", "patch_id", "origin_x", "origin_y", "side_px", "scale_tag", "foreground"]


@dataclass
class SlideRaster:
    slide_id: str
    pixels: np.ndarray  # (height, width, 3) uint8
    resolution_ppi: int
    subject_pid: str = ""

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(f"slide {self.slide_id}: pixels must be an (H, W, 3) uint8 array, got {self.pixels.shape} {self.pixels.dtype}")
        if self.resolution_ppi not in SUPPORTED_PPI:
            raise DataError(f"slide {self.slide_id}: unsupported resolution {self.resolution_ppi} ppi (expected one of {SUPPORTED_PPI})")

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]


@dataclass
class Patch:
    slide_id: str
    patch_id: str
    origin_x: int
    origin_y: int
    side_px: int
    scale_tag: str
    extent: tuple  # (width, height) actually covered; smaller than side only for clamped patches
    image: np.ndarray | None = None  # STORED_SIZE x STORED_SIZE x 3 float32 in [0, 1]
    raw: np.ndarray | None = field(default=None, repr=False)
    foreground: bool = False

    @property
    def clamped(self) -> bool:
        return self.extent != (self.side_px, self.side_px)


# ---------------------- Physical size ----------------------

def ppi_to_px_per_cm(ppi: float) -> float:
    return ppi / CM_PER_INCH


def physical_width(width_px: float, resolution_px_per_cm: float) -> float:
    """Width in cm = width in pixels / resolution (pixels per cm)."""
    if width_px <= 0:
        raise DataError(f"width must be positive, got {width_px}")
    if resolution_px_per_cm <= 0:
        raise DataError(f"resolution must be positive, got {resolution_px_per_cm}")
    return width_px / resolution_px_per_cm


def physical_area_mm2(side_px: int, ppi: int) -> float:
    side_mm = physical_width(side_px, ppi_to_px_per_cm(ppi)) * 10
    return side_mm * side_mm


# ---------------------- Grid ----------------------

def patch_side(scale_tag: str, ppi: int) -> int:
    try:
        return PATCH_SIDES[scale_tag][ppi]
    except KeyError:
        raise DataError(f"no patch side for scale {scale_tag!r} at {ppi} ppi") from None


def patch_count(length: int, side: int, overlap: int = OVERLAP_PX) -> int:
    """Patches along one axis: 1 if length <= side else ceil((length - side) / (side - overlap)) + 1."""
    if length <= side:
        return 1
    return math.ceil((length - side) / (side - overlap)) + 1


def patch_grid_origins(length: int, side: int, overlap: int = OVERLAP_PX) -> list:
    """Origins along one axis with stride side - overlap; the last patch is clamped to end at the edge."""
    if length <= side:
        return [0]
    stride = side - overlap
    count = patch_count(length, side, overlap)
    origins = [i * stride for i in range(count - 1)] + [length - side]
    return sorted(set(origins))


def tile(slide: SlideRaster, scale_tag: str, keep_raw: bool = False, resample: bool = True,
         min_fraction: float = MIN_TISSUE_FRACTION) -> list:
    """
    Cut a slide into row-major ordered patches (by origin_y, origin_x) and mark
    foreground ones. Only foreground patches are resampled to the stored size.
    """
    side = patch_side(scale_tag, slide.resolution_ppi)
    if slide.width_px < MIN_SIDE or slide.height_px < MIN_SIDE:
        raise DataError(
            f"slide {slide.slide_id} is {slide.width_px}x{slide.height_px} px; "
            f"both dimensions must be at least {MIN_SIDE} px"
        )
    xs = patch_grid_origins(slide.width_px, side)
    ys = patch_grid_origins(slide.height_px, side)
    extent_w = min(side, slide.width_px)
    extent_h = min(side, slide.height_px)
    if (extent_w, extent_h) != (side, side):
        logger.warning(f"Slide {slide.slide_id} smaller than one {side}px patch; using a single clamped patch")

    patches = []
    for row, y in enumerate(ys):
        for col, x in enumerate(xs):
            raw = slide.pixels[y:y + extent_h, x:x + extent_w]
            patch = Patch(
                slide_id=slide.slide_id,
                patch_id=f"{slide.slide_id}_{scale_tag}_{row:03d}_{col:03d}",
                origin_x=x,
                origin_y=y,
                side_px=side,
                scale_tag=scale_tag,
                extent=(extent_w, extent_h),
                raw=raw,
            )
            patch.foreground = foreground_filter(patch, min_fraction)
            if patch.foreground and resample:
                patch.image = downscale(patch)
            if not keep_raw:
                patch.raw = None
            patches.append(patch)
    return patches


# ---------------------- Foreground / resampling ----------------------

def tissue_mask(rgb: np.ndarray) -> np.ndarray:
    """Tissue pixels: HSV saturation >= 0.15 and value <= 0.92."""
    hsv = rgb_to_hsv(rgb.astype(np.float32) / 255.0)
    return (hsv[..., 1] >= TISSUE_MIN_SATURATION) & (hsv[..., 2] <= TISSUE_MAX_VALUE)


def tissue_fraction(rgb: np.ndarray) -> float:
    return float(tissue_mask(rgb).mean())


def foreground_filter(patch: Patch, min_fraction: float = MIN_TISSUE_FRACTION) -> bool:
    if patch.raw is None:
        raise DataError(f"patch {patch.patch_id}: raw pixels are required for foreground filtering")
    return tissue_fraction(patch.raw) >= min_fraction


def box_resample(image: np.ndarray, size: int = STORED_SIZE) -> np.ndarray:
    """Area-average resample of an (H, W, 3) image to size x size."""
    h, w = image.shape[:2]
    image = image.astype(np.float64)
    if h % size == 0 and w % size == 0:
        fy, fx = h // size, w // size
        return image.reshape(size, fy, size, fx, image.shape[2]).mean(axis=(1, 3))
    channels = [
        np.asarray(Image.fromarray(np.ascontiguousarray(image[..., c], dtype=np.float32)).resize((size, size), Image.Resampling.BOX))
        for c in range(image.shape[2])
    ]
    return np.stack(channels, axis=-1).astype(np.float64)


def downscale(patch: Patch) -> np.ndarray:
    """Box resample the raw patch to STORED_SIZE and scale to [0, 1] (float32)."""
    if patch.raw is None:
        raise DataError(f"patch {patch.patch_id}: raw pixels are required for resampling")
    scaled = box_resample(patch.raw) / 255.0
    return np.clip(scaled, 0.0, 1.0).astype(np.float32)


# ---------------------- Slide I/O ----------------------

def read_slide(image_path) -> SlideRaster:
    """Read an RGB PNG/TIFF raster and its `<slide_id>.json` sidecar."""
    image_path = Path(image_path)
    sidecar_path = image_path.with_suffix(".json")
    if not image_path.exists():
        raise MissingArtifactError(image_path)
    if not sidecar_path.exists():
        raise MissingArtifactError(sidecar_path)
    with open(sidecar_path, "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    try:
        jsonschema.validate(sidecar, SIDECAR_SCHEMA)
    except jsonschema.ValidationError as e:
        raise DataError(f"{sidecar_path}: {e.message}") from e

    Image.MAX_IMAGE_PIXELS = None
    with Image.open(image_path) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return SlideRaster(
        slide_id=sidecar["slide_id"],
        pixels=pixels,
        resolution_ppi=int(sidecar["ppi"]),
        subject_pid=sidecar["subject_pid"],
    )


def write_slide(slide: SlideRaster, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_path = out_dir / f"{slide.slide_id}.png"
    Image.fromarray(slide.pixels).save(image_path, format="PNG")
    with open(image_path.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump({"slide_id": slide.slide_id, "ppi": slide.resolution_ppi, "subject_pid": slide.subject_pid}, f, indent=2, sort_keys=True)
    return image_path


def list_slides(slides_dir) -> list:
    slides_dir = Path(slides_dir)
    if not slides_dir.is_dir():
        raise MissingArtifactError(slides_dir)
    paths = [p for p in slides_dir.iterdir() if p.suffix.lower() in (".png", ".tif", ".tiff")]
    return sorted(paths, key=lambda p: p.name)


def patch_manifest(patches: list) -> pd.DataFrame:
    rows = [
        {
            "slide_id": p.slide_id,
            "patch_id": p.patch_id,
            "origin_x": p.origin_x,
            "origin_y": p.origin_y,
            "side_px": p.side_px,
            "scale_tag": p.scale_tag,
            "foreground": int(p.foreground),
        }
        for p in patches
    ]
    return pd.DataFrame(rows, columns=MANIFEST_COLUMNS)


# ---------------------- Patch stacks ----------------------

def quantize(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def save_patch_stack(path, patches: list, meta: dict | None = None) -> Path:
    """Store the foreground patches' images as one uint8 (n, 256, 256, 3) array behind a PCH1 manifest."""
    kept = [p for p in patches if p.foreground and p.image is not None]
    images = np.stack([quantize(p.image) for p in kept]) if kept else np.zeros((0, STORED_SIZE, STORED_SIZE, 3), np.uint8)
    info = dict(meta or {})
    info["patch_ids"] = [p.patch_id for p in kept]
    info["slide_ids"] = [p.slide_id for p in kept]
    info["scale_tag"] = kept[0].scale_tag if kept else info.get("scale_tag", "")
    return write_container(path, PATCH_STACK_MAGIC, {"images": images}, info)


def load_patch_stack(path) -> tuple[np.ndarray, pd.DataFrame, dict]:
    """Returns (uint8 images, frame of patch_id/slide_id in stored order, meta)."""
    arrays, meta = read_container(path, PATCH_STACK_MAGIC)
    index = pd.DataFrame({"patch_id": meta["patch_ids"], "slide_id": meta["slide_ids"]})
    return arrays["images"], index, meta
