"""All five pruning strategies on one planted layer.

The interesting contrast: enumeration calibrated on a single domain keeps
only that domain's specialists (functional collapse); the global
variability ranking can keep two redundant duplicates; cluster-then-select
keeps one representative per functional group.
"""

import numpy as np

from moe_prune import (
    PlantedSpec,
    cache_from_inputs,
    domain_centroids,
    generate_calibration,
    generate_layer,
    prune_enum,
    prune_frequency,
    prune_gvp,
    prune_mop,
    prune_random,
)

spec = PlantedSpec(3, 2, 2, duplicate_noise=0.05, domain_separation=20.0, seed=42)
layer = generate_layer(spec, hidden_dim=16, ff_dim=32, top_k=2)
cache = generate_calibration(layer, spec, tokens_per_domain=100, seed=7)


def describe(plan):
    tags = {}
    for expert, tag in zip(plan.kept, plan.provenance):
        tags.setdefault(tag, []).append(expert)
    domains = sorted(
        {int(layer.specialist_domain[e]) for e in plan.kept if layer.specialist_domain[e] >= 0}
    )
    print(f"  {plan.method:16s} kept={plan.kept}  tags={tags}  specialist domains={domains}")


print("planted map:", [int(d) for d in layer.specialist_domain], "(pairs per domain, -1 = generalist)")
print("\nkeep r=4 of 8 experts, mixed-domain calibration:")
describe(prune_random(layer.n_experts, 4, seed=3))
describe(prune_frequency(cache, layer, 4))
describe(prune_enum(cache, layer, 4, mode="exhaustive"))
describe(prune_enum(cache, layer, 4, mode="greedy"))
describe(prune_gvp(cache, layer, 4, m=1))
describe(prune_mop(cache, layer, 4, m=1, kmeans_seed=0))

# calibrate enumeration on domain-0 tokens only: it has no reason to keep
# anything beyond domain 0, so ties resolve to the lowest indices
rng = np.random.default_rng(11)
centers = domain_centroids(spec, layer.hidden_dim)
single_inputs = (centers[0] + rng.standard_normal((300, 16))).astype(np.float32)
single = cache_from_inputs(layer, single_inputs,
                           source_domain=np.zeros(300, dtype=np.int32))
print("\nsame search calibrated on single-domain data (functional collapse):")
describe(prune_enum(single, layer, 4, mode="exhaustive"))

mop = prune_mop(cache, layer, 4, m=1, kmeans_seed=0)
print(f"\nmop diagnostics: ward groups {mop.diagnostics['groups']}")
print(f"general core chosen by reconstruction loss: {[int(e) for e in mop.diagnostics['general']]}")
print(f"variability scores: {np.round(mop.diagnostics['s_var'], 3)}")
