"""
Prompts, control maps and feature promotion
===========================================

The cross-modal path works on three ingredients:

1. learnable normal/abnormal prompt token pairs, encoded to unit vectors;
2. a per-patch control coefficient psi = (1 + tanh(alpha - beta)) / 2 where
   alpha/beta are the patch activations against the two text features;
3. promotion, which adds psi / ||f|| to every channel of the patch tensor.

This script walks through the identities that make the mechanism easy to
reason about.
"""

import torch

from normdistill import (ToyTextEncoder, ToyVisionEncoder, control_map, distill_loss,
                         encode_prompts, init_prompts, promote)

torch.manual_seed(0)

# A frozen toy backbone and its matching text projector. Same seed, same
# weights, every time.
vision = ToyVisionEncoder(resolution=32, patch_size=8, embed_dim=32, depth=3,
                          num_heads=4, tap_layers=(1, 2, 3), seed=1)
text = ToyTextEncoder(text_dim=16, embed_dim=32, seed=2)
prompts = init_prompts(prompt_length=12, text_dim=16, seed=3)

pairs = encode_prompts(prompts, text)
for p in pairs:
    print(f"layer {p.layer_index}: |g_n| = {p.g_normal.norm():.6f}, "
          f"cos(g_n, g_a) = {torch.dot(p.g_normal, p.g_abnormal):.4f}")

# Encode an image and compute the control map of the first tapped layer.
image = torch.rand(1, 32, 32, 3)
features = vision(image)
psi = control_map(features[0], pairs[0])
print(f"\npsi shape {tuple(psi.values.shape)}, range "
      f"[{psi.values.min():.4f}, {psi.values.max():.4f}]  (always inside (0, 1))")

# Identity 1: with identical text features the map is exactly one half.
flat = control_map(features[0], type(pairs[0])(pairs[0].g_normal,
                                               pairs[0].g_normal.clone(), 1))
print("equal prompts  ->  psi everywhere:", flat.values.unique().tolist())

# Identity 2: promotion is exactly invertible given psi and the scale.
promoted = promote(features[0], psi)
recovered = promoted.patches - promoted.lambda_scale.view(-1, 1, 1, 1) * psi.values.unsqueeze(-1)
print("promotion invertible:", torch.allclose(recovered, features[0].patches, atol=1e-6))

# Identity 3: the distillation loss is a single cosine per layer over the
# fully flattened tensors, so equal inputs give 0 and opposite ones give 6.
enc = [f.patches for f in features]
print("\ndistill(enc, enc)  =", float(distill_loss(enc, [e.clone() for e in enc])))
print("distill(enc, -enc) =", float(distill_loss(enc, [-e for e in enc])))

# The promotion shifts features only slightly (the scale is 1/||f||), but it
# moves encoded and decoded features differently wherever their text
# activations disagree, which is what sharpens the anomaly signal.
print(f"\npromotion magnitude per channel: {float(promoted.lambda_scale.max()):.5f}")
