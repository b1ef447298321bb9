"""Desk-scale experiment harness.

Scores a pruning plan on held-out tokens: overall and per-source-domain
reconstruction loss (sums over tokens, with token counts reported so
means are recoverable), planted-domain coverage when the layer carries
ground truth, and per-domain activation heatmaps of the deployed
(renormalized) gate weights. compare_methods runs a list of method
configs and tabulates them against the first as baseline.
"""

from __future__ import annotations

import io
import os
import time
from dataclasses import dataclass

import numpy as np

from .metrics import _check_cache_layer
from .moe_sim import CalibrationCache, MoELayer, forward_subset_batch, subset_gate_weights
from .prune import PruningPlan, prune_with_method


@dataclass
class EvalReport:
    method: str
    params: dict
    kept: list[int]
    overall_loss: float
    per_domain_loss: np.ndarray       # [D] summed squared error per source domain
    worst_domain_loss: float
    domain_token_counts: np.ndarray   # [D]
    n_tokens: int
    coverage: float | None            # needs planted ground truth on the layer
    heatmap: np.ndarray               # [D, n_layers, |kept|] mean deployed gate weights
    seed: int | None = None

    def mean_domain_loss(self) -> float:
        return float(self.per_domain_loss.mean())


def _coverage(layer: MoELayer, kept: list[int]) -> float | None:
    if layer.specialist_domain is None:
        return None
    domains = layer.specialist_domain
    planted = np.unique(domains[domains >= 0])
    if planted.size == 0:
        return None
    covered = {int(domains[i]) for i in kept if domains[i] >= 0}
    return len(covered) / planted.size


def evaluate_plan(
    layer: MoELayer, plan: PruningPlan, heldout: CalibrationCache
) -> EvalReport:
    """Score a plan on a held-out cache that carries source_domain labels."""
    _check_cache_layer(heldout, layer)
    n = plan.params.get("n")
    if n is not None and n != layer.n_experts:
        raise ValueError(f"plan was built for n={n} but layer has {layer.n_experts} experts")
    if any(i >= layer.n_experts for i in plan.kept):
        raise ValueError("plan keeps an expert the layer does not have")
    if heldout.source_domain is None:
        raise ValueError("held-out cache lacks source_domain labels for per-domain stats")

    pred = forward_subset_batch(layer, plan.kept, heldout.inputs)
    diff = pred.astype(np.float64) - heldout.outputs_full.astype(np.float64)
    per_token = (diff * diff).sum(axis=1)

    source = heldout.source_domain
    n_domains = int(source.max()) + 1
    counts = np.bincount(source, minlength=n_domains)
    if np.any(counts == 0):
        raise ValueError("held-out cache has an empty source domain")
    per_domain = np.array(
        [per_token[source == d].sum() for d in range(n_domains)], dtype=np.float64
    )

    weights, kept_idx = subset_gate_weights(layer, plan.kept, heldout.inputs)
    weights = weights.astype(np.float64)
    heatmap = np.empty((n_domains, 1, kept_idx.size), dtype=np.float64)
    for d in range(n_domains):
        heatmap[d, 0] = weights[source == d].mean(axis=0)

    return EvalReport(
        method=plan.method,
        params=dict(plan.params),
        kept=list(plan.kept),
        overall_loss=float(per_token.sum()),
        per_domain_loss=per_domain,
        worst_domain_loss=float(per_domain.max()),
        domain_token_counts=counts,
        n_tokens=heldout.n_tokens,
        coverage=_coverage(layer, plan.kept),
        heatmap=heatmap,
        seed=plan.params.get("seed"),
    )


# ---------------------------------------------------------------------------
# method comparison

COMPARISON_COLUMNS = (
    "method", "r", "m", "seed", "overall_loss", "worst_domain_loss",
    "coverage", "delta_overall", "delta_worst", "wall_time_s",
)


def compare_methods(
    layer: MoELayer,
    calibration: CalibrationCache,
    heldout: CalibrationCache,
    configs: list[dict],
) -> list[dict]:
    """Run each config (method, r, optional m/seed/kmeans_seed) and tabulate.

    Deltas are against the first config; wall_time_s is the only
    non-deterministic column.
    """
    if not configs:
        raise ValueError("configs must be nonempty")
    rows: list[dict] = []
    for config in configs:
        start = time.perf_counter()
        plan = prune_with_method(
            calibration,
            layer,
            method=config["method"],
            r=config["r"],
            m=config.get("m"),
            seed=config.get("seed"),
            kmeans_seed=config.get("kmeans_seed"),
        )
        wall = time.perf_counter() - start
        report = evaluate_plan(layer, plan, heldout)
        rows.append(
            {
                "method": plan.method,
                "r": config["r"],
                "m": config.get("m"),
                "seed": config.get("seed"),
                "overall_loss": report.overall_loss,
                "worst_domain_loss": report.worst_domain_loss,
                "coverage": report.coverage,
                "wall_time_s": wall,
                "report": report,
            }
        )
    base = rows[0]
    for row in rows:
        row["delta_overall"] = row["overall_loss"] - base["overall_loss"]
        row["delta_worst"] = row["worst_domain_loss"] - base["worst_domain_loss"]
    return rows


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def comparison_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(COMPARISON_COLUMNS) + "\n")
    for row in rows:
        buf.write(",".join(_format_cell(row.get(col)) for col in COMPARISON_COLUMNS) + "\n")
    return buf.getvalue()


def comparison_to_text(rows: list[dict]) -> str:
    table = [[_format_cell(row.get(col)) for col in COMPARISON_COLUMNS] for row in rows]
    widths = [
        max(len(COMPARISON_COLUMNS[c]), *(len(line[c]) for line in table)) if table
        else len(COMPARISON_COLUMNS[c])
        for c in range(len(COMPARISON_COLUMNS))
    ]
    lines = ["  ".join(h.ljust(w) for h, w in zip(COMPARISON_COLUMNS, widths))]
    for line in table:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(line, widths)))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# exports


def export_heatmap_csv(report: EvalReport, path_prefix: str | os.PathLike) -> list[str]:
    """One CSV per domain: rows are layers, columns the retained experts."""
    path_prefix = os.fspath(path_prefix)
    written: list[str] = []
    n_domains = report.heatmap.shape[0]
    header = "layer," + ",".join(f"expert_{i}" for i in report.kept)
    for d in range(n_domains):
        out = path_prefix + f"_domain{d}.csv"
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for layer_idx in range(report.heatmap.shape[1]):
                cells = ",".join(f"{v:.6f}" for v in report.heatmap[d, layer_idx])
                fh.write(f"{layer_idx},{cells}\n")
        written.append(out)
    return written


def report_to_csv(report: EvalReport) -> str:
    """Single-row summary CSV for one evaluated plan."""
    n_domains = report.per_domain_loss.size
    columns = ["method", "r", "m", "seed", "overall_loss", "worst_domain_loss", "coverage",
               "n_tokens"]
    columns += [f"domain{d}_loss" for d in range(n_domains)]
    columns += [f"domain{d}_tokens" for d in range(n_domains)]
    values = [
        report.method,
        report.params.get("r"),
        report.params.get("m"),
        report.params.get("seed"),
        report.overall_loss,
        report.worst_domain_loss,
        report.coverage,
        report.n_tokens,
    ]
    values += [float(x) for x in report.per_domain_loss]
    values += [int(x) for x in report.domain_token_counts]
    head = ",".join(columns)
    body = ",".join(_format_cell(v) for v in values)
    return head + "\n" + body + "\n"
