"""Domain discovery and expert grouping.

k-means over token hidden states recovers the planted domains; Spearman
rank correlation of per-domain error profiles gives a [0, 1] similarity
between experts; Ward-style agglomeration over the performance vectors
groups functional near-duplicates together.
"""

import numpy as np

from moe_prune import (
    PlantedSpec,
    generate_calibration,
    generate_layer,
    kmeans,
    performance_matrix,
    similarity_matrix,
    spearman_rho,
    ward_partition,
)

spec = PlantedSpec(3, 2, 2, duplicate_noise=0.05, domain_separation=20.0, seed=42)
layer = generate_layer(spec, hidden_dim=16, ff_dim=32, top_k=2)
cache = generate_calibration(layer, spec, tokens_per_domain=100, seed=7)

labeling = kmeans(cache.inputs, 3, seed=0, n_init=8)
print(f"k-means: wcss={labeling.wcss:.1f} after {labeling.iterations_run} iterations")
for k in range(3):
    sources = np.bincount(cache.source_domain[labeling.labels == k], minlength=3)
    print(f"  cluster {k}: tokens per true domain {[int(s) for s in sources]}")

print("\nspearman examples:")
print(f"  identical rankings : {spearman_rho([1, 2, 3], [10, 20, 30]):+.1f}")
print(f"  reversed rankings  : {spearman_rho([1, 2, 3], [30, 20, 10]):+.1f}")
print(f"  partial agreement  : {spearman_rho([1, 2, 3, 4], [2, 1, 4, 3]):+.1f}")

perf = performance_matrix(cache, layer, list(range(8)), labeling.labels)
sim = similarity_matrix(perf)
print("\nexpert similarity matrix ((1 + rho)/2 over per-domain error profiles):")
print(np.array_str(np.round(sim.s, 2), max_line_width=100))

partition = ward_partition(perf, sim, target_groups=3)
print(f"\nward partition into 3 groups: {partition.groups}")
print("duplicate specialist pairs land together; generalists attach to the")
print("nearest group instead of wasting a group of their own.")
print("merge trace (members_a, members_b, cost):")
for a, b, cost in partition.merge_trace:
    print(f"  {a} + {b}  cost {cost:.4f}")
