"""
slides.py
H&E-like synthetic slides whose textures follow a subject's latent age:
- epidermis band of thickness base * (1 - slope * age) px plus noise
- collagen fibres whose orientation spread widens with age
- nuclei speckle over the tissue
- after the onset age, a chance of a dark nevus cluster in the dermis

Each slide comes with a region mask (0 background, 1 epidermis, 2 collagen,
3 nevus) of the same size, kept with the hidden truth.
"""
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw

from histoage.imaging.tiler import SlideRaster, write_slide
from histoage.synth.cohort import GeneratorSpec
from histoage.utils.errors import DataError, MissingArtifactError
from histoage.utils.parallel import ordered_map
from histoage.utils.rng import numpy_rng

logger = logging.getLogger(__name__)

BACKGROUND, EPIDERMIS, COLLAGEN, NEVUS = 0, 1, 2, 3
REGION_NAMES = {BACKGROUND: "background", EPIDERMIS: "epidermis", COLLAGEN: "collagen", NEVUS: "nevus"}

BACKGROUND_RGB = (244, 244, 242)
EPIDERMIS_RGB = (150, 80, 160)
COLLAGEN_RGB = (225, 140, 185)
FIBRE_RGB = (196, 104, 156)
NUCLEUS_RGB = (72, 40, 120)
NEVUS_RGB = (92, 62, 52)

# A patch is labelled by a minority region once that region reaches this share.
REGION_MIN_SHARE = {NEVUS: 0.10, EPIDERMIS: 0.05}


def slide_id_for(pid: str) -> str:
    return f"{pid}-1"


def _smooth(values: np.ndarray, width: int) -> np.ndarray:
    width = max(1, min(width, len(values)))
    kernel = np.ones(width) / width
    return np.convolve(np.pad(values, width, mode="edge"), kernel, mode="same")[width:-width]


def _layer(size: int) -> tuple[Image.Image, ImageDraw.ImageDraw]:
    layer = Image.new("L", (size, size), 0)
    return layer, ImageDraw.Draw(layer)


def gen_slide(pid: str, latent_age: float, seed: int, spec: GeneratorSpec | None = None,
              size: int = 4096, ppi: int = 2140) -> tuple[SlideRaster, np.ndarray]:
    """Synthetic slide raster and its region mask for one subject."""
    if size < 224:
        raise DataError(f"slide size {size} is below one patch")
    spec = spec or GeneratorSpec()
    rng = numpy_rng(seed, "slide", pid)
    cols = np.arange(size, dtype=np.float64)
    rows = np.arange(size)[:, None]

    phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
    surface = (0.15 * size + 0.02 * size * np.sin(2.0 * np.pi * cols / (0.7 * size) + phase[0])
               + 0.01 * size * np.sin(2.0 * np.pi * cols / (0.23 * size) + phase[1]))
    thickness = spec.epidermis_thickness(latent_age) + _smooth(rng.normal(0.0, 4.0, size), 31)
    thickness = np.clip(thickness, 2.0, None)
    bottom = 0.9 * size + _smooth(rng.normal(0.0, 0.01 * size, size), 63)
    left, right = int(0.04 * size), int(0.96 * size)

    in_columns = np.zeros(size, dtype=bool)
    in_columns[left:right] = True
    tissue = (rows >= surface[None, :]) & (rows < bottom[None, :]) & in_columns[None, :]
    epidermis = tissue & (rows < (surface + thickness)[None, :])
    dermis = tissue & ~epidermis

    mask = np.zeros((size, size), dtype=np.uint8)
    mask[epidermis] = EPIDERMIS
    mask[dermis] = COLLAGEN
    pixels = np.empty((size, size, 3), dtype=np.float32)
    pixels[:] = BACKGROUND_RGB
    pixels[epidermis] = EPIDERMIS_RGB
    pixels[dermis] = COLLAGEN_RGB

    # collagen fibres: orientation spread grows with age
    fibres, draw = _layer(size)
    n_fibres = max(1, size * size // 4000)
    base_angle = rng.uniform(0.0, np.pi)
    angles = base_angle + np.deg2rad(rng.normal(0.0, spec.fibre_spread(latent_age), n_fibres))
    lengths = rng.uniform(0.02, 0.06, n_fibres) * size
    starts = rng.uniform(0.0, size, (n_fibres, 2))
    ends = starts + lengths[:, None] * np.column_stack([np.cos(angles), np.sin(angles)])
    width = max(1, size // 1024)
    for (x0, y0), (x1, y1) in zip(starts, ends):
        draw.line([(float(x0), float(y0)), (float(x1), float(y1))], fill=255, width=width)
    pixels[(np.asarray(fibres) > 0) & dermis] = FIBRE_RGB

    nevus_present = bool(rng.random() < spec.nevus_probability(latent_age))
    if nevus_present:
        blob, draw = _layer(size)
        cx = rng.uniform(0.2, 0.8) * size
        cy = float(np.median(surface + thickness)) + rng.uniform(0.05, 0.2) * size
        rx, ry = rng.uniform(0.04, 0.08, size=2) * size
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
        region = (np.asarray(blob) > 0) & dermis
        mask[region] = NEVUS
        pixels[region] = NEVUS_RGB

    nuclei, draw = _layer(size)
    n_nuclei = max(1, size * size // 1500)
    centres = rng.uniform(0.0, size, (n_nuclei, 2))
    radius = max(1.0, size / 2048.0)
    for x, y in centres:
        draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=255)
    pixels[(np.asarray(nuclei) > 0) & tissue] = NUCLEUS_RGB

    noise = rng.normal(0.0, 1.0, (size, size)).astype(np.float32)
    pixels += np.where(tissue, 6.0, 2.0).astype(np.float32)[:, :, None] * noise[:, :, None]
    raster = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    slide = SlideRaster(slide_id=slide_id_for(pid), pixels=raster, resolution_ppi=ppi, subject_pid=pid)
    return slide, mask


def epidermis_thickness(mask: np.ndarray) -> float:
    """Mean epidermis rows per tissue column."""
    counts = (mask == EPIDERMIS).sum(axis=0)
    columns = counts > 0
    return float(counts[columns].mean()) if columns.any() else 0.0


def dominant_region(mask: np.ndarray, origin_x: int, origin_y: int, side: int) -> str:
    """
    Region label of a patch window: nevus or epidermis once they reach their
    minimum share, otherwise the most frequent label.
    """
    window = mask[origin_y:origin_y + side, origin_x:origin_x + side]
    shares = np.bincount(window.ravel(), minlength=len(REGION_NAMES)) / max(window.size, 1)
    for label, share in REGION_MIN_SHARE.items():
        if shares[label] >= share:
            return REGION_NAMES[label]
    return REGION_NAMES[int(np.argmax(shares))]


def write_mask(mask: np.ndarray, slide_id: str, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{slide_id}.png"
    Image.fromarray(mask).save(path, format="PNG")
    return path


def read_mask(slide_id: str, mask_dir) -> np.ndarray:
    path = Path(mask_dir) / f"{slide_id}.png"
    if not path.is_file():
        raise MissingArtifactError(path)
    return np.asarray(Image.open(path))


def gen_slides(cohort: pd.DataFrame, latent: dict, seed: int, slides_dir, mask_dir,
               spec: GeneratorSpec | None = None, size: int = 4096, ppi: int = 2140, workers=None) -> list:
    """Write one slide (PNG + sidecar) per subject and its mask. Returns the slide paths in pid order."""
    spec = spec or GeneratorSpec()

    def build(pid):
        slide, mask = gen_slide(pid, latent[pid], seed, spec, size, ppi)
        path = write_slide(slide, slides_dir)
        write_mask(mask, slide.slide_id, mask_dir)
        return path

    pids = sorted(cohort["pid"])
    logger.info(f"SLIDE GENERATION START - {len(pids)} slides - {size}x{size} px at {ppi} ppi")
    paths = ordered_map(build, pids, workers)
    logger.info(f"SLIDE GENERATION COMPLETE - {len(paths)} slides")
    return paths
