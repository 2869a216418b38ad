"""
Gated mixture-of-experts routing
================================

Each fused patch is scored against T expert MLPs by a linear router with a
softmax; the top-K experts are kept and their weights renormalized into a
convex combination. An importance loss (the squared coefficient of variation
of summed scores) keeps the router from collapsing onto a few experts.
"""

import torch

from normdistill import MoEConfig, Router, importance_loss, moe_forward, route
from normdistill.moe import make_experts, top_k_weights

torch.manual_seed(4)

cfg = MoEConfig(num_experts=5, top_k=2, hidden_dim=32)
router = Router(embed_dim=16, num_experts=cfg.num_experts)
experts = make_experts(16, cfg)

# Route a single patch: two experts survive, weights sum to one.
patch = torch.randn(16)
assignment = route(patch, router, top_k=cfg.top_k)
print("softmax scores:", [round(s, 3) for s in assignment.scores.tolist()])
print("selected      :", assignment.topk_indices.tolist(),
      "weights", [round(w, 3) for w in assignment.topk_weights.tolist()])

# The batched path evaluates only the experts that were actually selected.
patches = torch.randn(512, 16)
out, scores = moe_forward(patches, router, experts, top_k=cfg.top_k)
indices, _ = top_k_weights(scores, cfg.top_k)
usage = torch.bincount(indices.ravel(), minlength=cfg.num_experts)
print("\nexpert usage over 512 patches:", usage.tolist())
print("importance loss:", float(importance_loss(scores, cfg.epsilon)))

# Tie-breaking is deterministic: equal scores prefer the lower expert index.
tied = torch.full((1, 4), 0.25)
idx, w = top_k_weights(tied, 2)
print("\ntied scores pick experts", idx.tolist()[0], "with weights", w.tolist()[0])

# Watch the importance loss rebalance a deliberately skewed router.
with torch.no_grad():
    router.linear.bias.copy_(torch.tensor([5.0, 0.0, -1.0, -1.0, -2.0]))
opt = torch.optim.SGD(router.parameters(), lr=0.1)
print("\nrebalancing a skewed router:")
for step in range(6):
    loss = importance_loss(router(patches), cfg.epsilon)
    opt.zero_grad()
    loss.backward()
    opt.step()
    if step % 2 == 0:
        with torch.no_grad():
            usage = torch.bincount(top_k_weights(router(patches), cfg.top_k)[0].ravel(),
                                   minlength=cfg.num_experts)
        print(f"  step {step}: loss={float(loss.detach()):.4f} usage={usage.tolist()}")
