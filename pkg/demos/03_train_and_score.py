"""
Training a model and exporting heatmaps
=======================================

End-to-end walk through the pipeline at miniature scale: synthesize data,
train for a few epochs, evaluate the five metrics and export an anomaly
heatmap for the worst-scoring test image.

Training here is deliberately tiny (two categories, 16px, 6 epochs); see the
acceptance suite for the full desk-scale run with its quality gates.
"""

import tempfile
from pathlib import Path

from normdistill import (RunConfig, SynthSpec, evaluate, export_heatmap, fit,
                         generate_synthetic, load_dataset, score_dataset)

workdir = Path(tempfile.mkdtemp(prefix="normdistill_demo_"))
data_root = workdir / "dataset"

spec = SynthSpec(num_categories=2, train_images=24, test_good=4, test_anomalous=8,
                 resolution=32, seed=0, min_defect_fraction=0.01, max_defect_fraction=0.2)
generate_synthetic(spec, data_root)

# A small but complete configuration. Every field shown here can also live
# in an INI file consumed by the CLI (`normdistill train --config run.ini`).
cfg = RunConfig()
cfg.encoder.depth = 4
cfg.encoder.tap_layers = (1, 2, 3)
cfg.encoder.embed_dim = 32
cfg.encoder.num_heads = 4
cfg.encoder.patch_size = 4
cfg.encoder.text_dim = 16
cfg.train.resolution = 32
cfg.train.epochs = 15
cfg.train.batch_size = 4
cfg.train.learning_rate = 0.002
cfg.train.noise_std = 0.25
cfg.constraint.tau = 0.1

train = load_dataset(data_root, "train", resolution=cfg.train.resolution)
test = load_dataset(data_root, "test", resolution=cfg.train.resolution)

state, log = fit(train, cfg, out_dir=workdir / "run")
print("per-epoch loss breakdown (every third epoch):")
for row in log[::3] + [log[-1]]:
    print(f"  epoch {row['epoch']}: total={row['total']:.4f} distill={row['distill']:.4f} "
          f"constraint={row['constraint']:.4f} moe={row['moe']:.4f}")

# The evaluation report carries one row per category plus the unweighted mean,
# in the order I-AUROC / P-AUROC / AUPRO / I-mAP / P-mAP.
report = evaluate(state, test)
for name, row in report.categories.items():
    print(f"{name}: {row.i_auroc:.3f}/{row.p_auroc:.3f}/{row.aupro:.3f}"
          f"/{row.i_map:.3f}/{row.p_map:.3f}")
print(f"mean: {report.mean.i_auroc:.3f}/{report.mean.p_auroc:.3f}/{report.mean.aupro:.3f}"
      f"/{report.mean.i_map:.3f}/{report.mean.p_map:.3f}")

# Score every test image, pick the highest image score and render it. The
# overlay is normalized by the fixed theoretical maximum (6.0), never by the
# per-image range, so brightness is comparable across images.
results = score_dataset(state, test)
worst = max(range(len(test)), key=lambda i: results[i].image_score)
sample = test[worst]
heatmap_path = workdir / "worst_case.png"
export_heatmap(results[worst], sample.pixels.numpy(), heatmap_path,
               raw_path=workdir / "worst_case.raw")
print(f"\nhighest image score {results[worst].image_score:.3f} "
      f"({sample.category}/{sample.defect_type}) -> {heatmap_path}")
print(f"training artifacts (checkpoint, logs, effective config) in {workdir / 'run'}")
