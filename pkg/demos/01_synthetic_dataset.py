"""
Generating a synthetic defect dataset
=====================================

The package ships a deterministic generator that writes an MVTec-style
directory tree: per category a `train/good` split of clean textures, a
`test/` split mixing good images with three defect kinds, and exact
ground-truth masks under `ground_truth/`.

Run from the repository root:

    python demos/01_synthetic_dataset.py
"""

import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from normdistill import SynthSpec, generate_synthetic, load_dataset

out_root = Path(tempfile.mkdtemp(prefix="normdistill_demo_")) / "dataset"

# Three categories means one of each texture family: stripes, a rectangular
# checkerboard and cellular value-noise. Counts here are tiny so the demo
# finishes in a couple of seconds.
spec = SynthSpec(
    num_categories=3,
    train_images=8,
    test_good=3,
    test_anomalous=6,
    resolution=64,
    seed=7,
)
generate_synthetic(spec, out_root)
print(f"dataset written to {out_root}")

# The layout follows the usual industrial-inspection convention.
for path in sorted(out_root.rglob("*"))[:8]:
    print("  ", path.relative_to(out_root))

# Loading pools every category into one deterministic sample stream; the
# multi-class setting trains a single model on all of them at once.
train = load_dataset(out_root, "train", resolution=64)
test = load_dataset(out_root, "test", resolution=64)
print(f"\n{len(train)} training samples, {len(test)} test samples")
print("categories:", sorted({s.category for s in train}))

# Every anomalous test image carries an exact pixel mask; defect sizes stay
# within the configured fraction bounds.
fractions = [float(s.mask.float().mean()) for s in test if s.is_anomalous]
print(f"defect pixel fractions: min={min(fractions):.4f} max={max(fractions):.4f}")

# Build a small montage: one normal image plus one of each defect kind per
# category, masks alongside.
tiles, labels = [], []
for category in sorted({s.category for s in test}):
    rows = [s for s in test if s.category == category]
    picks = [next(s for s in rows if not s.is_anomalous)]
    for kind in ("patch_swap", "intensity_blot", "scratch_line"):
        match = [s for s in rows if s.defect_type == kind]
        if match:
            picks.append(match[0])
    tiles.append(picks)

pad = 4
side = spec.resolution
canvas = Image.new("RGB", ((side + pad) * 2 * len(tiles[0]), (side + pad) * len(tiles)), "white")
for row, picks in enumerate(tiles):
    for col, sample in enumerate(picks):
        img = Image.fromarray((sample.pixels.numpy() * 255).astype(np.uint8))
        canvas.paste(img, (col * 2 * (side + pad), row * (side + pad)))
        mask = sample.mask.numpy() if sample.mask is not None else np.zeros((side, side), bool)
        canvas.paste(Image.fromarray((mask * 255).astype(np.uint8)).convert("RGB"),
                     (col * 2 * (side + pad) + side + pad // 2, row * (side + pad)))

montage_path = out_root.parent / "montage.png"
canvas.save(montage_path)
print(f"\nimage/mask montage saved to {montage_path}")
