"""Slide rasters, patch tiling and contrastive augmentation."""
