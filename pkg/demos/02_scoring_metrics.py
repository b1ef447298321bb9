"""The scoring primitives every pruning method builds on.

Reconstruction loss ranks retained subsets; the variability score (KL
from uniform over the token axis, in bits) separates specialists from
generalists; the performance matrix profiles each expert's per-domain
single-expert error.
"""

import itertools

import numpy as np

from moe_prune import (
    PlantedSpec,
    activation_frequency,
    generate_calibration,
    generate_layer,
    performance_matrix,
    reconstruction_loss,
    variability_scores,
)

spec = PlantedSpec(3, 2, 2, duplicate_noise=0.05, domain_separation=20.0, seed=42)
layer = generate_layer(spec, hidden_dim=16, ff_dim=32, top_k=2)
cache = generate_calibration(layer, spec, tokens_per_domain=100, seed=7)

print("reconstruction loss (sum of squared output error over the cache):")
print(f"  all 8 experts kept : {reconstruction_loss(cache, layer, range(8)):.6f}")
print(f"  drop one duplicate : {reconstruction_loss(cache, layer, [0,2,3,4,5,6,7]):.4f}")
print(f"  only generalists   : {reconstruction_loss(cache, layer, [6,7]):.1f}")

best = min(itertools.combinations(range(8), 4),
           key=lambda s: reconstruction_loss(cache, layer, s))
print(f"  best 4-subset by exhaustive search: {sorted(best)}")

scores = variability_scores(cache)
print("\nvariability scores in bits (specialists high, generalists low):")
for e in range(8):
    kind = f"domain-{layer.specialist_domain[e]}" if layer.specialist_domain[e] >= 0 else "generalist"
    print(f"  expert {e} ({kind:10s}): {scores.scores[e]:.3f}")
print(f"  upper bound log2(n_tokens) = {np.log2(cache.n_tokens):.3f}")

counts = activation_frequency(cache, top_k=2)
print(f"\ntop-2 activation counts per expert: {[int(c) for c in counts]}")

perf = performance_matrix(cache, layer, list(range(8)), cache.source_domain.astype(int))
print("\nperformance matrix (mean single-expert error per domain):")
print(np.array_str(np.round(perf.errors, 1), max_line_width=100))
print("each specialist's smallest error sits in its own domain column;")
print("generalist rows (last two) are flat across columns.")
