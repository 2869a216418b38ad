"""
Metric semantics, by construction
=================================

The five evaluation metrics are rank-based, so any strictly increasing
transform of the scores leaves them unchanged. This script pokes at the
corner cases that define each metric's behavior, using fabricated score maps
where the right answer is known by hand.
"""

import numpy as np

from normdistill import aupro, auroc, average_precision

rng = np.random.default_rng(0)

# AUROC is the probability that a random positive outranks a random negative,
# ties counting one half.
print("hand case:", auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]), "(3 wins + 1 loss of 4 pairs)")
print("all ties:  ", auroc([1, 1, 1, 1], [0, 1, 0, 1]))

# Average precision sums precision at every recall step over descending
# thresholds; a single positive ranked second of two scores exactly 0.5.
print("AP, positive at rank 2 of 2:", average_precision([0.2, 0.9], [1, 0]))

# Monotone invariance: squashing scores through exp or arctan changes nothing.
scores = rng.normal(size=30)
labels = rng.integers(0, 2, size=30)
labels[:2] = (0, 1)
print("\nAUROC raw vs exp-transformed:",
      auroc(scores, labels), auroc(np.exp(scores), labels))

# AUPRO rewards detecting every connected region, not just the large ones.
# Two regions: a big blob and a single pixel. A detector that only finds the
# blob saturates at mean recall 0.5 until the threshold drops to zero.
mask = np.zeros((16, 16), dtype=bool)
mask[2:8, 2:8] = True          # 36-pixel region
mask[12, 12] = True            # single-pixel region
blob_only = mask.astype(float)
blob_only[12, 12] = 0.0

print("\nperfect detector AUPRO:", aupro([mask.astype(float)], [mask]))
print("misses the small region:", round(aupro([blob_only], [mask]), 4))

# Pixel-level AUROC would barely notice the missing pixel:
flat_scores = blob_only.ravel()
flat_labels = mask.ravel()
print("same detector, pixel AUROC:", round(auroc(flat_scores, flat_labels), 4))

# Connectivity matters: a diagonal touch merges regions under 8-connectivity
# but not under 4-connectivity, which changes the region count and the score.
diag = np.zeros((8, 8), dtype=bool)
diag[2, 2] = diag[3, 3] = diag[3, 4] = True
partial = np.zeros((8, 8))
partial[2, 2] = 1.0
print("\ndiagonal regions, 8-connectivity:", aupro([partial], [diag], connectivity=8))
print("diagonal regions, 4-connectivity:", aupro([partial], [diag], connectivity=4))
