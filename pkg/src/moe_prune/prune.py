"""The five expert-retention strategies, each producing a PruningPlan.

random and frequency are baselines. enum searches for the subset
minimizing reconstruction loss, exhaustively when the subset count fits
a budget and greedily (peel off the cheapest expert one at a time)
otherwise. gvp keeps a reconstruction-optimal general core and fills
the remaining slots with the globally highest variability scores. mop
shares the general core but replaces the global ranking with
cluster-then-select: k-means domains over the cached inputs, Ward
groups over per-domain performance vectors, one top-variability
representative per group. All ties break toward the lower expert index.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensor_store
from .cluster import (
    decode_groups,
    encode_groups,
    kmeans,
    similarity_matrix,
    ward_partition,
)
from .metrics import (
    activation_frequency,
    performance_matrix,
    reconstruction_loss,
    variability_scores,
)
from .moe_sim import CalibrationCache, MoELayer

METHODS = ("random", "frequency", "enum_exhaustive", "enum_greedy", "gvp", "mop")
DEFAULT_SUBSET_BUDGET = 100_000

PROVENANCE_GENERAL = "general"
PROVENANCE_DIVERSITY = "diversity"
PROVENANCE_BASELINE = "baseline"


def default_general_count(r: int) -> int:
    """Default size of the general core: half the slots, never all of them."""
    return min(math.ceil(r / 2), r - 1)


@dataclass
class PruningPlan:
    method: str
    kept: list[int]
    provenance: list[str]
    params: dict
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.kept = [int(i) for i in self.kept]
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        r = self.params.get("r")
        n = self.params.get("n")
        if r is not None and len(self.kept) != r:
            raise ValueError(f"plan keeps {len(self.kept)} experts, expected r={r}")
        if len(set(self.kept)) != len(self.kept):
            raise ValueError("kept indices must be unique")
        if any(i < 0 for i in self.kept):
            raise ValueError("kept indices must be nonnegative")
        if n is not None and any(i >= n for i in self.kept):
            raise ValueError(f"kept index out of range [0, {n})")
        if len(self.provenance) != len(self.kept):
            raise ValueError("provenance must tag every kept expert")
        valid = {PROVENANCE_GENERAL, PROVENANCE_DIVERSITY, PROVENANCE_BASELINE}
        if any(tag not in valid for tag in self.provenance):
            raise ValueError(f"provenance tags must be in {sorted(valid)}")
        if self.method in ("gvp", "mop"):
            m = self.params.get("m")
            n_general = self.provenance.count(PROVENANCE_GENERAL)
            n_div = self.provenance.count(PROVENANCE_DIVERSITY)
            if m is not None and (n_general != m or n_div != len(self.kept) - m):
                raise ValueError(
                    f"expected {m} general + {len(self.kept) - m} diversity tags, "
                    f"got {n_general} + {n_div}"
                )
        if self.method == "mop" and "groups" in self.diagnostics:
            groups = self.diagnostics["groups"]
            div = [i for i, tag in zip(self.kept, self.provenance) if tag == PROVENANCE_DIVERSITY]
            homes = []
            for expert in div:
                home = [g for g, members in enumerate(groups) if expert in members]
                if len(home) != 1:
                    raise ValueError(f"diversity expert {expert} not in exactly one group")
                homes.append(home[0])
            if len(set(homes)) != len(homes):
                raise ValueError("diversity experts must map to distinct groups")

    def general_experts(self) -> list[int]:
        return [i for i, t in zip(self.kept, self.provenance) if t == PROVENANCE_GENERAL]

    def diversity_experts(self) -> list[int]:
        return [i for i, t in zip(self.kept, self.provenance) if t == PROVENANCE_DIVERSITY]


def _plan(method: str, kept: Iterable[int], tags: dict[int, str], params: dict,
          diagnostics: dict) -> PruningPlan:
    kept_sorted = sorted(int(i) for i in kept)
    return PruningPlan(
        method=method,
        kept=kept_sorted,
        provenance=[tags[i] for i in kept_sorted],
        params=params,
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# baselines


def prune_random(n: int, r: int, seed: int) -> PruningPlan:
    """Keep a uniformly random r-subset of the n experts."""
    if not 1 <= r <= n:
        raise ValueError(f"r {r} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    kept = sorted(int(i) for i in rng.choice(n, size=r, replace=False))
    return PruningPlan(
        method="random",
        kept=kept,
        provenance=[PROVENANCE_BASELINE] * r,
        params={"n": n, "r": r, "m": None, "K": None, "seed": seed},
    )


def prune_frequency(cache: CalibrationCache, layer: MoELayer, r: int) -> PruningPlan:
    """Keep the r most frequently top-k-activated experts."""
    n = layer.n_experts
    if not 1 <= r <= n:
        raise ValueError(f"r {r} outside [1, {n}]")
    counts = activation_frequency(cache, layer.top_k)
    order = np.argsort(-counts, kind="stable")
    kept = sorted(int(i) for i in order[:r])
    return PruningPlan(
        method="frequency",
        kept=kept,
        provenance=[PROVENANCE_BASELINE] * r,
        params={"n": n, "r": r, "m": None, "K": None, "seed": None},
        diagnostics={"activation_counts": counts},
    )


# ---------------------------------------------------------------------------
# reconstruction-loss search


def _search_exhaustive(
    cache: CalibrationCache, layer: MoELayer, size: int, budget: int
) -> tuple[list[int], float, dict]:
    n = layer.n_experts
    n_subsets = math.comb(n, size)
    if n_subsets > budget:
        raise ValueError(
            f"C({n}, {size}) = {n_subsets} subsets exceeds the budget of {budget}; "
            "use the greedy mode"
        )
    best_subset: tuple[int, ...] | None = None
    best_loss = math.inf
    subsets = np.empty((n_subsets, size), dtype=np.int32)
    losses = np.empty(n_subsets, dtype=np.float64)
    for row, subset in enumerate(itertools.combinations(range(n), size)):
        loss = reconstruction_loss(cache, layer, subset)
        subsets[row] = subset
        losses[row] = loss
        if loss < best_loss:  # strict: ties keep the lexicographically first subset
            best_loss = loss
            best_subset = subset
    assert best_subset is not None
    diag = {"subsets": subsets, "losses": losses, "best_loss": best_loss}
    return list(best_subset), best_loss, diag


def _search_greedy(
    cache: CalibrationCache, layer: MoELayer, size: int
) -> tuple[list[int], float, dict]:
    current = list(range(layer.n_experts))
    removed: list[int] = []
    step_losses: list[float] = []
    while len(current) > size:
        best_i = -1
        best_loss = math.inf
        for i in current:  # ascending, so loss ties remove the lower index
            loss = reconstruction_loss(cache, layer, [j for j in current if j != i])
            if loss < best_loss:
                best_loss = loss
                best_i = i
        current.remove(best_i)
        removed.append(best_i)
        step_losses.append(best_loss)
    final_loss = reconstruction_loss(cache, layer, current)
    diag = {
        "removed_order": np.asarray(removed, dtype=np.int32),
        "step_losses": np.asarray(step_losses, dtype=np.float64),
        "best_loss": final_loss,
    }
    return current, final_loss, diag


def prune_enum(
    cache: CalibrationCache,
    layer: MoELayer,
    r: int,
    mode: str = "exhaustive",
    budget: int = DEFAULT_SUBSET_BUDGET,
) -> PruningPlan:
    """Minimize reconstruction loss over r-subsets, exactly or greedily."""
    n = layer.n_experts
    if not 1 <= r <= n:
        raise ValueError(f"r {r} outside [1, {n}]")
    if mode == "exhaustive":
        kept, loss, diag = _search_exhaustive(cache, layer, r, budget)
    elif mode == "greedy":
        kept, loss, diag = _search_greedy(cache, layer, r)
    else:
        raise ValueError(f"mode must be 'exhaustive' or 'greedy', got {mode!r}")
    return PruningPlan(
        method=f"enum_{mode}",
        kept=sorted(kept),
        provenance=[PROVENANCE_BASELINE] * r,
        params={"n": n, "r": r, "m": None, "K": None, "seed": None},
        diagnostics=diag,
    )


def _select_general(
    cache: CalibrationCache,
    layer: MoELayer,
    m: int,
    budget: int,
    allow_greedy_fallback: bool,
) -> tuple[list[int], dict]:
    """Stage 1 shared by gvp and mop: the m-subset minimizing reconstruction loss."""
    if m == 0:
        return [], {"stage1_mode": "none"}
    if math.comb(layer.n_experts, m) <= budget:
        kept, loss, diag = _search_exhaustive(cache, layer, m, budget)
        mode = "exhaustive"
    elif allow_greedy_fallback:
        kept, loss, diag = _search_greedy(cache, layer, m)
        mode = "greedy"
    else:
        raise ValueError(
            f"C({layer.n_experts}, {m}) exceeds the budget of {budget} and the "
            "greedy fallback is disabled"
        )
    return kept, {"stage1_mode": mode, "stage1_loss": loss}


def prune_gvp(
    cache: CalibrationCache,
    layer: MoELayer,
    r: int,
    m: int | None = None,
    budget: int = DEFAULT_SUBSET_BUDGET,
    allow_greedy_fallback: bool = True,
) -> PruningPlan:
    """General core by reconstruction loss, then a global variability ranking."""
    n = layer.n_experts
    if not 1 <= r <= n:
        raise ValueError(f"r {r} outside [1, {n}]")
    if m is None:
        m = default_general_count(r)
    if not 0 <= m < r:
        raise ValueError(f"m {m} outside [0, {r})")

    general, stage_diag = _select_general(cache, layer, m, budget, allow_greedy_fallback)
    scores = variability_scores(cache)
    candidates = [i for i in range(n) if i not in set(general)]
    by_score = sorted(candidates, key=lambda i: (-scores.scores[i], i))
    diversity = by_score[: r - m]

    tags = {i: PROVENANCE_GENERAL for i in general}
    tags.update({i: PROVENANCE_DIVERSITY for i in diversity})
    return _plan(
        "gvp",
        general + diversity,
        tags,
        {"n": n, "r": r, "m": m, "K": None, "seed": None},
        {
            "s_var": scores.scores,
            "general": np.asarray(sorted(general), dtype=np.int32),
            **stage_diag,
        },
    )


def prune_mop(
    cache: CalibrationCache,
    layer: MoELayer,
    r: int,
    m: int | None = None,
    kmeans_seed: int = 0,
    budget: int = DEFAULT_SUBSET_BUDGET,
    allow_greedy_fallback: bool = True,
    kmeans_max_iters: int = 100,
    kmeans_restarts: int = 8,
) -> PruningPlan:
    """Cluster-then-select: one top-variability representative per expert group."""
    n = layer.n_experts
    if not 1 <= r <= n:
        raise ValueError(f"r {r} outside [1, {n}]")
    if m is None:
        m = default_general_count(r)
    if not 0 <= m < r:
        raise ValueError(f"m {m} outside [0, {r})")
    n_groups = r - m

    general, stage_diag = _select_general(cache, layer, m, budget, allow_greedy_fallback)
    candidates = [i for i in range(n) if i not in set(general)]

    labeling = kmeans(
        cache.inputs, n_groups, seed=kmeans_seed,
        max_iters=kmeans_max_iters, n_init=kmeans_restarts,
    )
    perf = performance_matrix(cache, layer, candidates, labeling.labels)
    sim = similarity_matrix(perf)
    partition = ward_partition(perf, sim, n_groups)

    scores = variability_scores(cache)
    representatives: list[int] = []
    for group in partition.groups:
        best = min(group, key=lambda i: (-scores.scores[i], i))
        representatives.append(best)

    tags = {i: PROVENANCE_GENERAL for i in general}
    tags.update({i: PROVENANCE_DIVERSITY for i in representatives})
    return _plan(
        "mop",
        general + representatives,
        tags,
        {"n": n, "r": r, "m": m, "K": n_groups, "seed": kmeans_seed},
        {
            "s_var": scores.scores,
            "general": np.asarray(sorted(general), dtype=np.int32),
            "labels": labeling.labels,
            "centroids": labeling.centroids,
            "groups": [list(g) for g in partition.groups],
            "similarity": sim.s,
            "distance_diag": partition.distance_diag,
            "perf_errors": perf.errors,
            "candidate_ids": perf.candidate_ids,
            **stage_diag,
        },
    )


# ---------------------------------------------------------------------------
# dispatch and serialization


def prune_with_method(
    cache: CalibrationCache,
    layer: MoELayer,
    method: str,
    r: int,
    m: int | None = None,
    seed: int | None = None,
    kmeans_seed: int | None = None,
    budget: int = DEFAULT_SUBSET_BUDGET,
) -> PruningPlan:
    """Run one strategy by name; 'enum' infers the mode from the budget."""
    if method == "random":
        return prune_random(layer.n_experts, r, seed if seed is not None else 0)
    if method == "frequency":
        return prune_frequency(cache, layer, r)
    if method == "enum":
        mode = "exhaustive" if math.comb(layer.n_experts, r) <= budget else "greedy"
        return prune_enum(cache, layer, r, mode=mode, budget=budget)
    if method == "enum_exhaustive":
        return prune_enum(cache, layer, r, mode="exhaustive", budget=budget)
    if method == "enum_greedy":
        return prune_enum(cache, layer, r, mode="greedy", budget=budget)
    if method == "gvp":
        return prune_gvp(cache, layer, r, m=m, budget=budget)
    if method == "mop":
        return prune_mop(
            cache, layer, r, m=m,
            kmeans_seed=kmeans_seed if kmeans_seed is not None else 0,
            budget=budget,
        )
    raise ValueError(f"unknown method {method!r}")


def save_plan(plan: PruningPlan, path: str | os.PathLike) -> None:
    """Write ``<path>.json`` plus a ``<path>.diag`` archive when diagnostics exist."""
    path = os.fspath(path)
    diag_name = None
    if plan.diagnostics:
        diag_name = os.path.basename(path) + ".diag"
        arrays: list[tuple[str, np.ndarray]] = []
        scalars: dict[str, str] = {"kind": "plan_diagnostics"}
        for key, value in plan.diagnostics.items():
            if key == "groups":
                offsets, flat = encode_groups(value)
                arrays.append(("groups_offsets", offsets))
                arrays.append(("groups_members", flat))
            elif isinstance(value, np.ndarray):
                arrays.append((key, value))
            else:
                scalars[key] = repr(value)
        tensor_store.write_archive(path + ".diag", arrays, scalars)
    doc = {
        "method": plan.method,
        "params": plan.params,
        "kept": plan.kept,
        "provenance": plan.provenance,
        "diagnostics_archive": diag_name,
    }
    with open(path + ".json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_plan(path: str | os.PathLike) -> PruningPlan:
    path = os.fspath(path)
    with open(path + ".json", "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    diagnostics: dict = {}
    if doc.get("diagnostics_archive"):
        diag_path = os.path.join(os.path.dirname(path), doc["diagnostics_archive"])
        manifest, arrays = tensor_store.read_archive(diag_path)
        if "groups_offsets" in arrays:
            diagnostics["groups"] = decode_groups(
                arrays.pop("groups_offsets"), arrays.pop("groups_members")
            )
        diagnostics.update(arrays)
        for key, value in manifest.metadata.items():
            if key != "kind" and key not in diagnostics:
                diagnostics[key] = value
    return PruningPlan(
        method=doc["method"],
        kept=doc["kept"],
        provenance=doc["provenance"],
        params=doc["params"],
        diagnostics=diagnostics,
    )
