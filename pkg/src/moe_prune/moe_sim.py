"""Simulated mixture-of-experts layer with planted functional structure.

The layer is a softmax router over ``n`` two-matrix feed-forward experts
with top-k token routing. The generator plants known structure: each
domain gets a target transform duplicated (plus noise) across its
specialist experts, generalists average the domain targets, and router
rows point at the domain centroids so domain-d inputs favor domain-d
specialists. That ground truth is what the evaluation module scores
pruning methods against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor_store

GATE_ROW_SUM_TOL = 1e-5


def _as_f32(name: str, value: np.ndarray, ndim: int) -> np.ndarray:
    arr = np.ascontiguousarray(value, dtype=np.float32)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass
class ExpertTransform:
    """One expert: x -> w_out @ relu(w_in @ x)."""

    w_in: np.ndarray   # [ff_dim, hidden_dim]
    w_out: np.ndarray  # [hidden_dim, ff_dim]

    def __post_init__(self) -> None:
        self.w_in = _as_f32("w_in", self.w_in, 2)
        self.w_out = _as_f32("w_out", self.w_out, 2)
        if self.w_out.shape[1] != self.w_in.shape[0]:
            raise ValueError(
                f"w_out inner dim {self.w_out.shape[1]} != w_in outer dim {self.w_in.shape[0]}"
            )

    @property
    def hidden_dim(self) -> int:
        return self.w_in.shape[1]

    @property
    def ff_dim(self) -> int:
        return self.w_in.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Expert output for a batch of rows, shape [N, hidden_dim]."""
        hidden = np.maximum(x @ self.w_in.T, np.float32(0.0))
        return hidden @ self.w_out.T


@dataclass
class MoELayer:
    router: np.ndarray  # [n_experts, hidden_dim] logit weights
    experts: list[ExpertTransform]
    top_k: int
    specialist_domain: np.ndarray | None = None  # planted map, -1 for generalists

    def __post_init__(self) -> None:
        self.router = _as_f32("router", self.router, 2)
        if not self.experts:
            raise ValueError("layer needs at least one expert")
        if len(self.experts) != self.router.shape[0]:
            raise ValueError(
                f"router has {self.router.shape[0]} rows for {len(self.experts)} experts"
            )
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        for i, expert in enumerate(self.experts):
            if expert.hidden_dim != self.hidden_dim or expert.w_out.shape[0] != self.hidden_dim:
                raise ValueError(f"expert {i} dims do not match hidden_dim {self.hidden_dim}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k {self.top_k} outside [1, {self.n_experts}]")
        if self.specialist_domain is not None:
            dom = np.ascontiguousarray(self.specialist_domain, dtype=np.int32)
            if dom.shape != (self.n_experts,):
                raise ValueError("specialist_domain must have one entry per expert")
            self.specialist_domain = dom

    @property
    def n_experts(self) -> int:
        return self.router.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.router.shape[1]

    @property
    def ff_dim(self) -> int:
        return self.experts[0].ff_dim


@dataclass(frozen=True)
class PlantedSpec:
    """Blueprint for a layer with known specialist/generalist structure."""

    n_domains: int
    specialists_per_domain: int
    n_generalists: int
    duplicate_noise: float
    domain_separation: float
    seed: int

    def __post_init__(self) -> None:
        if self.n_domains < 1 or self.specialists_per_domain < 1:
            raise ValueError("need at least one domain with one specialist")
        if self.n_generalists < 0:
            raise ValueError("n_generalists must be >= 0")
        if self.duplicate_noise < 0:
            raise ValueError("duplicate_noise must be >= 0")
        if self.domain_separation <= 0:
            raise ValueError("domain_separation must be > 0")

    @property
    def n_experts(self) -> int:
        return self.n_domains * self.specialists_per_domain + self.n_generalists


@dataclass
class CalibrationCache:
    """Cached token inputs, original layer outputs, and full gate probabilities."""

    inputs: np.ndarray        # [N, hidden_dim]
    outputs_full: np.ndarray  # [N, hidden_dim]
    gate_probs: np.ndarray    # [N, n_experts], full softmax (not top-k masked)
    domain_labels: np.ndarray | None = None  # discovered labels in [0, K)
    source_domain: np.ndarray | None = None  # generator ground truth

    def __post_init__(self) -> None:
        self.inputs = _as_f32("inputs", self.inputs, 2)
        self.outputs_full = _as_f32("outputs_full", self.outputs_full, 2)
        self.gate_probs = _as_f32("gate_probs", self.gate_probs, 2)
        n = self.inputs.shape[0]
        if n < 1:
            raise ValueError("cache must hold at least one token")
        if self.outputs_full.shape != self.inputs.shape:
            raise ValueError("outputs_full shape does not match inputs")
        if self.gate_probs.shape[0] != n:
            raise ValueError("gate_probs token count does not match inputs")
        if np.any(self.gate_probs < 0):
            raise ValueError("gate_probs must be nonnegative")
        row_sums = self.gate_probs.sum(axis=1, dtype=np.float64)
        if np.any(np.abs(row_sums - 1.0) > GATE_ROW_SUM_TOL):
            worst = int(np.argmax(np.abs(row_sums - 1.0)))
            raise ValueError(
                f"gate_probs row {worst} sums to {row_sums[worst]:.8f}, expected 1"
            )
        for attr in ("domain_labels", "source_domain"):
            vec = getattr(self, attr)
            if vec is not None:
                vec = np.ascontiguousarray(vec, dtype=np.int32)
                if vec.shape != (n,):
                    raise ValueError(f"{attr} must have one entry per token")
                setattr(self, attr, vec)

    @property
    def n_tokens(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_experts(self) -> int:
        return self.gate_probs.shape[1]


# ---------------------------------------------------------------------------
# generation


def domain_centroids(spec: PlantedSpec, hidden_dim: int) -> np.ndarray:
    """Input-space centroids, pairwise separated by exactly domain_separation.

    Scaled axis vectors form a regular simplex, so hidden_dim must be at
    least n_domains. Shared by generate_layer (router targets) and
    generate_calibration (cluster centers).
    """
    if hidden_dim < spec.n_domains:
        raise ValueError(
            f"hidden_dim {hidden_dim} < n_domains {spec.n_domains}; centroids need one axis each"
        )
    scale = spec.domain_separation / math.sqrt(2.0)
    centroids = np.zeros((spec.n_domains, hidden_dim), dtype=np.float32)
    for d in range(spec.n_domains):
        centroids[d, d] = scale
    return centroids


def generate_layer(
    spec: PlantedSpec, hidden_dim: int, ff_dim: int, top_k: int
) -> MoELayer:
    """Build a layer with planted structure, deterministic given spec.seed."""
    centroids = domain_centroids(spec, hidden_dim)
    rng = np.random.default_rng(spec.seed)

    targets_in = [
        rng.standard_normal((ff_dim, hidden_dim)) / math.sqrt(hidden_dim)
        for _ in range(spec.n_domains)
    ]
    targets_out = [
        rng.standard_normal((hidden_dim, ff_dim)) / math.sqrt(ff_dim)
        for _ in range(spec.n_domains)
    ]

    noise = spec.duplicate_noise
    experts: list[ExpertTransform] = []
    specialist_domain: list[int] = []
    for d in range(spec.n_domains):
        for _ in range(spec.specialists_per_domain):
            w_in = targets_in[d] + noise * rng.standard_normal((ff_dim, hidden_dim)) / math.sqrt(hidden_dim)
            w_out = targets_out[d] + noise * rng.standard_normal((hidden_dim, ff_dim)) / math.sqrt(ff_dim)
            experts.append(ExpertTransform(w_in, w_out))
            specialist_domain.append(d)
    mean_in = np.mean(targets_in, axis=0)
    mean_out = np.mean(targets_out, axis=0)
    for _ in range(spec.n_generalists):
        w_in = mean_in + noise * rng.standard_normal((ff_dim, hidden_dim)) / math.sqrt(hidden_dim)
        w_out = mean_out + noise * rng.standard_normal((hidden_dim, ff_dim)) / math.sqrt(ff_dim)
        experts.append(ExpertTransform(w_in, w_out))
        specialist_domain.append(-1)

    directions = centroids / np.linalg.norm(centroids, axis=1, keepdims=True)
    router = np.zeros((spec.n_experts, hidden_dim))
    for e, d in enumerate(specialist_domain):
        if d >= 0:
            router[e] = directions[d]
        router[e] += noise * rng.standard_normal(hidden_dim) / math.sqrt(hidden_dim)

    return MoELayer(
        router=router,
        experts=experts,
        top_k=top_k,
        specialist_domain=np.asarray(specialist_domain, dtype=np.int32),
    )


def _check_compatible(layer: MoELayer, spec: PlantedSpec) -> None:
    if layer.n_experts != spec.n_experts:
        raise ValueError(
            f"layer has {layer.n_experts} experts but spec implies {spec.n_experts}"
        )
    if layer.hidden_dim < spec.n_domains:
        raise ValueError("layer hidden_dim too small for spec's domain count")


def generate_calibration(
    layer: MoELayer, spec: PlantedSpec, tokens_per_domain: int, seed: int
) -> CalibrationCache:
    """Draw per-domain Gaussian token clusters and run the full layer over them.

    Domains are interleaved round-robin in token order; cluster std is 1.
    """
    if tokens_per_domain < 1:
        raise ValueError("tokens_per_domain must be >= 1")
    _check_compatible(layer, spec)

    rng = np.random.default_rng(seed)
    centroids = domain_centroids(spec, layer.hidden_dim)
    n_total = spec.n_domains * tokens_per_domain
    inputs = np.empty((n_total, layer.hidden_dim), dtype=np.float32)
    source = np.empty(n_total, dtype=np.int32)
    for d in range(spec.n_domains):
        draws = centroids[d] + rng.standard_normal((tokens_per_domain, layer.hidden_dim))
        inputs[d :: spec.n_domains] = draws.astype(np.float32)
        source[d :: spec.n_domains] = d
    return cache_from_inputs(layer, inputs, source_domain=source)


def cache_from_inputs(
    layer: MoELayer, inputs: np.ndarray, source_domain: np.ndarray | None = None
) -> CalibrationCache:
    """Cache arbitrary inputs: full-layer outputs plus full gate distribution."""
    inputs = _as_f32("inputs", inputs, 2)
    if inputs.shape[1] != layer.hidden_dim:
        raise ValueError("inputs width does not match layer hidden_dim")
    all_experts = list(range(layer.n_experts))
    return CalibrationCache(
        inputs=inputs,
        outputs_full=forward_subset_batch(layer, all_experts, inputs),
        gate_probs=gate_batch(layer, inputs),
        source_domain=source_domain,
    )


# ---------------------------------------------------------------------------
# forward passes


def gate_batch(layer: MoELayer, inputs: np.ndarray) -> np.ndarray:
    """Full softmax over all experts for each row of `inputs`, shape [N, n]."""
    inputs = _as_f32("inputs", inputs, 2)
    logits = inputs @ layer.router.T
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs


def gate(layer: MoELayer, x: np.ndarray) -> np.ndarray:
    """Full gate distribution for one token (sums to 1, never top-k masked)."""
    x = _as_f32("x", np.asarray(x), 1)
    return gate_batch(layer, x[None, :])[0]


def _normalize_kept(layer: MoELayer, kept: Iterable[int]) -> np.ndarray:
    idx = np.asarray(sorted(int(i) for i in kept), dtype=np.int64)
    if idx.size == 0:
        raise ValueError("kept set must be nonempty")
    if np.any(idx < 0) or np.any(idx >= layer.n_experts):
        raise ValueError(f"kept indices out of range [0, {layer.n_experts})")
    if np.unique(idx).size != idx.size:
        raise ValueError("kept indices must be unique")
    return idx


def subset_gate_weights(
    layer: MoELayer, kept: Iterable[int], inputs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Deployed routing weights of a pruned layer.

    Softmax over the retained experts' logits, top-min(top_k, |kept|)
    selection (ties to the lower expert index), renormalized to sum to 1.
    Returns (weights [N, |kept|], kept indices ascending).
    """
    idx = _normalize_kept(layer, kept)
    inputs = _as_f32("inputs", inputs, 2)
    logits = inputs @ layer.router[idx].T

    k_sel = min(layer.top_k, idx.size)
    # stable sort on -logits: same order as restricted-softmax probabilities,
    # ties resolve to the lower column = lower expert index
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k_sel]
    rows = np.arange(logits.shape[0])[:, None]
    # renormalized top-k probabilities == softmax over just the selected
    # logits; computing it that way keeps the weights independent of the
    # non-selected experts down to the last bit
    selected = logits[rows, order]
    selected -= selected.max(axis=1, keepdims=True)
    top = np.exp(selected)
    top /= top.sum(axis=1, keepdims=True)
    weights = np.zeros_like(logits)
    weights[rows, order] = top
    return weights, idx


def forward_subset_batch(
    layer: MoELayer, kept: Iterable[int], inputs: np.ndarray
) -> np.ndarray:
    """Pruned-layer outputs for a batch; kept = all reproduces the full layer."""
    weights, idx = subset_gate_weights(layer, kept, inputs)
    inputs = _as_f32("inputs", inputs, 2)
    out = np.zeros_like(inputs)
    for col, e in enumerate(idx):
        out += weights[:, col : col + 1] * layer.experts[int(e)].apply(inputs)
    return out


def forward_subset(layer: MoELayer, kept: Iterable[int], x: np.ndarray) -> np.ndarray:
    x = _as_f32("x", np.asarray(x), 1)
    return forward_subset_batch(layer, kept, x[None, :])[0]


def forward_full_batch(layer: MoELayer, inputs: np.ndarray) -> np.ndarray:
    return forward_subset_batch(layer, range(layer.n_experts), inputs)


def forward_full(layer: MoELayer, x: np.ndarray) -> np.ndarray:
    """Original-layer output: top-k routed, renormalized mixture."""
    return forward_subset(layer, range(layer.n_experts), x)


def forward_single(layer: MoELayer, i: int, x: np.ndarray) -> np.ndarray:
    """Output with only expert i active at weight exactly 1 (gate bypassed)."""
    if not 0 <= i < layer.n_experts:
        raise IndexError(f"expert index {i} out of range [0, {layer.n_experts})")
    x = _as_f32("x", np.asarray(x), 1)
    return layer.experts[i].apply(x[None, :])[0]


def forward_single_batch(layer: MoELayer, i: int, inputs: np.ndarray) -> np.ndarray:
    if not 0 <= i < layer.n_experts:
        raise IndexError(f"expert index {i} out of range [0, {layer.n_experts})")
    inputs = _as_f32("inputs", inputs, 2)
    return layer.experts[i].apply(inputs)


# ---------------------------------------------------------------------------
# serialization (array names are part of the on-disk contract)


def save_layer(layer: MoELayer, path: str, extra_metadata: dict[str, str] | None = None):
    arrays: list[tuple[str, np.ndarray]] = [("router", layer.router)]
    for i, expert in enumerate(layer.experts):
        arrays.append((f"expert_{i}_w_in", expert.w_in))
        arrays.append((f"expert_{i}_w_out", expert.w_out))
    if layer.specialist_domain is not None:
        arrays.append(("specialist_domain", layer.specialist_domain))
    metadata = {
        "kind": "moe_layer",
        "n_experts": str(layer.n_experts),
        "hidden_dim": str(layer.hidden_dim),
        "ff_dim": str(layer.ff_dim),
        "top_k": str(layer.top_k),
    }
    metadata.update(extra_metadata or {})
    return tensor_store.write_archive(path, arrays, metadata)


def load_layer(path: str) -> MoELayer:
    manifest, arrays = tensor_store.read_archive(path)
    if manifest.metadata.get("kind") != "moe_layer":
        raise tensor_store.ArchiveError("archive does not hold a moe_layer")
    n = int(manifest.metadata["n_experts"])
    experts = [
        ExpertTransform(arrays[f"expert_{i}_w_in"], arrays[f"expert_{i}_w_out"])
        for i in range(n)
    ]
    return MoELayer(
        router=arrays["router"],
        experts=experts,
        top_k=int(manifest.metadata["top_k"]),
        specialist_domain=arrays.get("specialist_domain"),
    )


def save_cache(cache: CalibrationCache, path: str, extra_metadata: dict[str, str] | None = None):
    arrays: list[tuple[str, np.ndarray]] = [
        ("inputs", cache.inputs),
        ("outputs_full", cache.outputs_full),
        ("gate_probs", cache.gate_probs),
    ]
    if cache.domain_labels is not None:
        arrays.append(("domain_labels", cache.domain_labels))
    if cache.source_domain is not None:
        arrays.append(("source_domain", cache.source_domain))
    metadata = {"kind": "calibration_cache", "n_tokens": str(cache.n_tokens)}
    metadata.update(extra_metadata or {})
    return tensor_store.write_archive(path, arrays, metadata)


def load_cache(path: str) -> CalibrationCache:
    manifest, arrays = tensor_store.read_archive(path)
    if manifest.metadata.get("kind") != "calibration_cache":
        raise tensor_store.ArchiveError("archive does not hold a calibration_cache")
    return CalibrationCache(
        inputs=arrays["inputs"],
        outputs_full=arrays["outputs_full"],
        gate_probs=arrays["gate_probs"],
        domain_labels=arrays.get("domain_labels"),
        source_domain=arrays.get("source_domain"),
    )
