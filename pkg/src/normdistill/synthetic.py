"""Deterministic synthetic defect dataset generator (MVTec-style layout).

Each category gets its own procedural texture family (stripes, rectangular
checker, cellular value-noise) with category-specific colors and frequencies,
so categories have visibly distinct patch statistics. Test anomalies are
composited defects with exact pixel masks:

* ``patch_swap``     — a square region replaced by a rotated copy from elsewhere
* ``intensity_blot`` — an elliptical color/intensity shift
* ``scratch_line``   — a thin bright or dark line segment

Generation is bit-reproducible per seed (the same spec writes byte-identical
files), and every defect mask covers a configurable fraction of the image.
"""

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, InputError

DEFECT_KINDS = ("patch_swap", "intensity_blot", "scratch_line")
TEXTURE_FAMILIES = ("stripes", "checker", "cellular")


@dataclass
class SynthSpec:
    """Synthetic dataset description; all counts are per category."""

    num_categories: int = 3
    train_images: int = 64
    test_good: int = 8
    test_anomalous: int = 16
    resolution: int = 64
    defect_kinds: tuple = DEFECT_KINDS
    seed: int = 0
    min_defect_fraction: float = 0.005
    max_defect_fraction: float = 0.10

    def __post_init__(self):
        if isinstance(self.defect_kinds, str):
            self.defect_kinds = tuple(k.strip() for k in self.defect_kinds.split(","))
        self.defect_kinds = tuple(self.defect_kinds)
        unknown = set(self.defect_kinds) - set(DEFECT_KINDS)
        if unknown:
            raise ConfigurationError(f"unknown defect kinds {sorted(unknown)}")
        if not self.defect_kinds:
            raise ConfigurationError("need at least one defect kind")
        if self.num_categories < 1 or self.resolution < 16:
            raise ConfigurationError("num_categories >= 1 and resolution >= 16 required")
        if not 0 < self.min_defect_fraction < self.max_defect_fraction < 1:
            raise ConfigurationError("need 0 < min_defect_fraction < max_defect_fraction < 1")


def load_synth_spec(path) -> SynthSpec:
    """Parse a [synth] section from an INI file; unknown keys are rejected."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read synth spec {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed synth spec {path}: {exc}") from exc
    if parser.sections() != ["synth"]:
        raise ConfigurationError("synth spec must contain exactly one [synth] section")
    defaults = {f.name: getattr(SynthSpec(), f.name) for f in fields(SynthSpec)}
    values = {}
    for key, raw in parser.items("synth"):
        if key not in defaults:
            raise ConfigurationError(f"unknown key {key!r} in [synth]")
        default = defaults[key]
        if isinstance(default, bool):
            values[key] = raw.strip().lower() in ("true", "1", "yes", "on")
        elif isinstance(default, int):
            values[key] = int(raw)
        elif isinstance(default, float):
            values[key] = float(raw)
        elif isinstance(default, tuple):
            values[key] = tuple(part.strip() for part in raw.split(","))
        else:
            values[key] = raw.strip()
    return SynthSpec(**values)


def _category_params(category_index: int, seed: int) -> dict:
    rng = np.random.default_rng([seed, category_index, 0xCA7])
    family = TEXTURE_FAMILIES[category_index % len(TEXTURE_FAMILIES)]
    c0 = rng.uniform(0.10, 0.45, size=3)
    c1 = rng.uniform(0.55, 0.90, size=3)
    params = {"family": family, "c0": c0, "c1": c1}
    if family == "stripes":
        params["freq"] = rng.uniform(4.0, 7.0)
        params["angle"] = rng.uniform(0.0, np.pi)
    elif family == "checker":
        params["cell_h"] = int(rng.integers(5, 9))
        params["cell_w"] = int(rng.integers(10, 16))  # rectangular, so rotation is visible
    else:
        params["grid"] = int(rng.integers(4, 8))
    return params


def _render_texture(params: dict, res: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    c0, c1 = params["c0"], params["c1"]
    if params["family"] == "stripes":
        phase = rng.uniform(0, 2 * np.pi)
        t = (xx * np.cos(params["angle"]) + yy * np.sin(params["angle"]))
        v = 0.5 * (1.0 + np.sin(2 * np.pi * params["freq"] * t / res + phase))
    elif params["family"] == "checker":
        oy = int(rng.integers(0, params["cell_h"]))
        ox = int(rng.integers(0, params["cell_w"]))
        v = ((((yy + oy) // params["cell_h"]) + ((xx + ox) // params["cell_w"])) % 2)
    else:
        g = params["grid"]
        knots = rng.random((g + 1, g + 1))
        coords = np.linspace(0, g, res)
        i0 = np.clip(coords.astype(int), 0, g - 1)
        frac = coords - i0
        rows = knots[i0][:, i0] * (1 - frac)[None, :] + knots[i0][:, i0 + 1] * frac[None, :]
        rows_next = knots[i0 + 1][:, i0] * (1 - frac)[None, :] + knots[i0 + 1][:, i0 + 1] * frac[None, :]
        v = rows * (1 - frac)[:, None] + rows_next * frac[:, None]
    img = c0[None, None, :] + (c1 - c0)[None, None, :] * v[..., None]
    img += rng.normal(0.0, 0.015, size=(res, res, 3))
    return np.clip(img, 0.0, 1.0)


def _ellipse_mask(res: int, rng: np.random.Generator, target_area: float) -> np.ndarray:
    ratio = rng.uniform(0.5, 2.0)
    a = np.sqrt(target_area * ratio / np.pi)
    b = target_area / (np.pi * a)
    angle = rng.uniform(0, np.pi)
    cy = rng.uniform(a + 1, res - a - 1) if 2 * a + 2 < res else res / 2
    cx = rng.uniform(a + 1, res - a - 1) if 2 * a + 2 < res else res / 2
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(angle) + dy * np.sin(angle)
    w = -dx * np.sin(angle) + dy * np.cos(angle)
    return (u / a) ** 2 + (w / b) ** 2 <= 1.0


def _line_mask(res: int, rng: np.random.Generator, target_area: float) -> np.ndarray:
    width = float(rng.integers(3, 6))
    length = min(target_area / width, res * 0.85)
    angle = rng.uniform(0, np.pi)
    dx, dy = length * np.cos(angle), length * np.sin(angle)
    x0 = rng.uniform(abs(dx) / 2 + 1, res - abs(dx) / 2 - 1)
    y0 = rng.uniform(abs(dy) / 2 + 1, res - abs(dy) / 2 - 1)
    p0 = np.array([x0 - dx / 2, y0 - dy / 2])
    p1 = np.array([x0 + dx / 2, y0 + dy / 2])
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    pts = np.stack([xx, yy], axis=-1)
    seg = p1 - p0
    t = np.clip(((pts - p0) @ seg) / (seg @ seg), 0.0, 1.0)
    nearest = p0 + t[..., None] * seg
    dist = np.linalg.norm(pts - nearest, axis=-1)
    return dist <= width / 2.0


def _apply_defect(image: np.ndarray, kind: str, rng: np.random.Generator,
                  spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Composite one defect; returns (image, exact boolean mask)."""
    res = spec.resolution
    lo, hi = spec.min_defect_fraction, spec.max_defect_fraction
    for _ in range(32):
        target_area = rng.uniform(lo * 1.5, hi * 0.8) * res * res
        out = image.copy()
        if kind == "intensity_blot":
            mask = _ellipse_mask(res, rng, target_area)
            delta = rng.uniform(0.30, 0.55) * rng.choice([-1.0, 1.0])
            tint = rng.uniform(0.7, 1.0, size=3)
            out[mask] = np.clip(out[mask] + delta * tint, 0.0, 1.0)
        elif kind == "scratch_line":
            mask = _line_mask(res, rng, target_area)
            value = rng.choice([rng.uniform(0.0, 0.05), rng.uniform(0.95, 1.0)])
            out[mask] = value
        elif kind == "patch_swap":
            side = int(np.clip(np.sqrt(target_area), 4, res // 3))
            sy, sx = rng.integers(0, res - side, size=2)
            dy, dx = rng.integers(0, res - side, size=2)
            # rotate and partially invert the donor patch so the swap stays
            # visible even on rotation-symmetric textures
            patch = np.rot90(image[sy:sy + side, sx:sx + side].copy())
            patch = np.clip(0.15 + 0.7 * (1.0 - patch), 0.0, 1.0)
            out[dy:dy + side, dx:dx + side] = patch
            mask = np.zeros((res, res), dtype=bool)
            mask[dy:dy + side, dx:dx + side] = True
        else:
            raise ConfigurationError(f"unknown defect kind {kind!r}")
        fraction = mask.mean()
        if lo <= fraction <= hi and mask.any():
            return out, mask
    raise ConfigurationError(
        f"could not place a {kind} defect within the fraction bounds [{lo}, {hi}]")


def _save_image(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path, format="PNG")


def _save_mask(mask: np.ndarray, path: Path) -> None:
    Image.fromarray((mask.astype(np.uint8) * 255), mode="L").save(path, format="PNG")


def category_name(index: int) -> str:
    return f"{TEXTURE_FAMILIES[index % len(TEXTURE_FAMILIES)]}{index:02d}"


def generate_synthetic(spec: SynthSpec, out_path, overwrite: bool = False) -> Path:
    """Write the full dataset tree; returns the dataset root path.

    Refuses a non-empty target directory unless `overwrite` is set (existing
    files are then replaced in place).
    """
    root = Path(out_path)
    if root.exists() and any(root.iterdir()) and not overwrite:
        raise InputError(f"target {root} is not empty; pass overwrite to replace it")
    root.mkdir(parents=True, exist_ok=True)

    for cat_idx in range(spec.num_categories):
        name = category_name(cat_idx)
        params = _category_params(cat_idx, spec.seed)
        train_dir = root / name / "train" / "good"
        test_good_dir = root / name / "test" / "good"
        train_dir.mkdir(parents=True, exist_ok=True)
        test_good_dir.mkdir(parents=True, exist_ok=True)

        for i in range(spec.train_images):
            rng = np.random.default_rng([spec.seed, cat_idx, 1, i])
            _save_image(_render_texture(params, spec.resolution, rng), train_dir / f"{i:03d}.png")
        for i in range(spec.test_good):
            rng = np.random.default_rng([spec.seed, cat_idx, 2, i])
            _save_image(_render_texture(params, spec.resolution, rng), test_good_dir / f"{i:03d}.png")

        per_kind_counter: dict[str, int] = {}
        for i in range(spec.test_anomalous):
            rng = np.random.default_rng([spec.seed, cat_idx, 3, i])
            kind = spec.defect_kinds[i % len(spec.defect_kinds)]
            image = _render_texture(params, spec.resolution, rng)
            image, mask = _apply_defect(image, kind, rng, spec)
            idx = per_kind_counter.get(kind, 0)
            per_kind_counter[kind] = idx + 1
            img_dir = root / name / "test" / kind
            mask_dir = root / name / "ground_truth" / kind
            img_dir.mkdir(parents=True, exist_ok=True)
            mask_dir.mkdir(parents=True, exist_ok=True)
            _save_image(image, img_dir / f"{idx:03d}.png")
            _save_mask(mask, mask_dir / f"{idx:03d}_mask.png")
    return root


__all__ = ["DEFECT_KINDS", "TEXTURE_FAMILIES", "SynthSpec", "load_synth_spec",
           "category_name", "generate_synthetic"]
