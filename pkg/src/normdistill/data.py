"""Dataset layout (MVTec-style) loading and validation.

Layout per category:
    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect_type>/*.png        ('good' = normal)
    <root>/<category>/ground_truth/<defect_type>/<stem>_mask.png

Every anomalous test image must have a mask of its own resolution; the train
split may only contain the 'good' subdirectory. Samples are delivered in
(category, defect_type, filename) order, so iteration is deterministic.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DatasetIntegrityError, InputError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class ImageSample:
    """One image with its label, optional ground-truth mask and category tag.

    pixels: (H, W, 3) float32 in [0, 1]; mask: (H, W) bool or None.
    The category is kept for reporting only; the model never sees it.
    """

    pixels: torch.Tensor
    category: str
    is_anomalous: bool
    mask: Optional[torch.Tensor] = None
    defect_type: str = "good"
    path: Optional[Path] = None

    def __post_init__(self):
        if self.pixels.dim() != 3 or self.pixels.shape[-1] != 3:
            raise InputError(f"pixels must be (H, W, 3), got {tuple(self.pixels.shape)}")
        if float(self.pixels.min()) < 0.0 or float(self.pixels.max()) > 1.0:
            raise InputError("pixel values must lie in [0, 1]")
        if self.mask is not None and self.mask.shape != self.pixels.shape[:2]:
            raise InputError(
                f"mask shape {tuple(self.mask.shape)} != image shape {tuple(self.pixels.shape[:2])}")


def load_image(path, resolution: Optional[int] = None) -> torch.Tensor:
    """Read an RGB image as a (H, W, 3) float32 tensor in [0, 1]."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if resolution is not None and img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), resample=Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def load_mask(path, resolution: Optional[int] = None) -> torch.Tensor:
    """Read a binary mask as a (H, W) bool tensor (nearest-neighbour resize)."""
    with Image.open(path) as img:
        img = img.convert("L")
        if resolution is not None and img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), resample=Image.NEAREST)
        arr = np.asarray(img) > 0
    return torch.from_numpy(arr)


def list_categories(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetIntegrityError(f"dataset root {root} is not a directory")
    return sorted(p.name for p in root.iterdir() if p.is_dir())


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _mask_path(root: Path, category: str, defect_type: str, image: Path) -> Path:
    return root / category / "ground_truth" / defect_type / f"{image.stem}_mask.png"


def load_dataset(root, split: str, categories: Optional[Sequence[str]] = None,
                 resolution: Optional[int] = None) -> list[ImageSample]:
    """Load one split as a deterministic, multi-category pooled sample list.

    Args:
        root: dataset root directory.
        split: 'train' or 'test'.
        categories: optional subset filter; defaults to every category.
        resolution: resize target (images bilinear, masks nearest).

    Raises:
        DatasetIntegrityError: non-'good' directories in the train split,
            anomalous test images without a mask, or mask/image size mismatch.
    """
    if split not in ("train", "test"):
        raise InputError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(root)
    available = list_categories(root)
    if categories is None:
        selected = available
    else:
        missing = sorted(set(categories) - set(available))
        if missing:
            raise DatasetIntegrityError(f"unknown categories {missing}; present: {available}")
        selected = sorted(categories)

    samples: list[ImageSample] = []
    for category in selected:
        split_dir = root / category / split
        if not split_dir.is_dir():
            raise DatasetIntegrityError(f"missing split directory {split_dir}")
        defect_dirs = sorted(p for p in split_dir.iterdir() if p.is_dir())
        if split == "train":
            bad = [p.name for p in defect_dirs if p.name != "good"]
            if bad:
                raise DatasetIntegrityError(
                    f"train split of {category!r} contains non-good directories {bad}")
        for defect_dir in defect_dirs:
            defect_type = defect_dir.name
            anomalous = defect_type != "good"
            for image_path in _image_files(defect_dir):
                pixels = load_image(image_path, resolution)
                mask = None
                if anomalous:
                    mask_path = _mask_path(root, category, defect_type, image_path)
                    if not mask_path.is_file():
                        raise DatasetIntegrityError(
                            f"missing mask for anomalous image {image_path} "
                            f"(expected {mask_path})")
                    with Image.open(mask_path) as m, Image.open(image_path) as img:
                        if m.size != img.size:
                            raise DatasetIntegrityError(
                                f"mask resolution {m.size} != image resolution {img.size} "
                                f"for {image_path}")
                    mask = load_mask(mask_path, resolution)
                samples.append(ImageSample(
                    pixels=pixels, category=category, is_anomalous=anomalous,
                    mask=mask, defect_type=defect_type, path=image_path))
    return samples


__all__ = ["ImageSample", "load_image", "load_mask", "list_categories", "load_dataset"]
