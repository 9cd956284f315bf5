"""
Optimal-transport token assignment
==================================

Nearest-neighbour quantization sends a tight cluster of latents to one or
two codes. An entropic optimal-transport plan with uniform marginals forces
the batch to spread over the codebook, which keeps every code alive.
"""
import numpy as np

from shapetok.vq import TokenSequence, assign_nearest, assign_ot, shortcut_coin, sinkhorn_plan

rng = np.random.default_rng(0)
codes = rng.normal(size=(8, 4))
latents = codes[2] + 0.01 * rng.normal(size=(16, 4))

print("nearest codes used:", sorted(set(assign_nearest(latents, codes).tolist())))
print("OT codes used     :", sorted(set(assign_ot(latents, codes).tolist())))

plan = sinkhorn_plan(rng.random((64, 256)))
print("row / column marginal error:", np.abs(plan.sum(1) - 1 / 64).max(), np.abs(plan.sum(0) - 1 / 256).max())

# during training each step flips a seeded coin: half the steps skip
# quantization entirely and feed a linear projection of the raw latents
coins = [shortcut_coin(0, s) for s in range(10)]
print("first ten steps:", coins)

# tokens travel as a tiny binary file
tok = TokenSequence(assign_nearest(latents, codes), 8)
print("token file bytes:", tok.to_bytes()[:13], "+", len(tok) * 4, "index bytes")
