"""Shared fixture builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from moe_prune import (
    CalibrationCache,
    ExpertTransform,
    MoELayer,
    PlantedSpec,
    cache_from_inputs,
    domain_centroids,
    generate_calibration,
    generate_layer,
)


def make_random_layer(rng, n=6, hidden=8, ff=16, top_k=2) -> MoELayer:
    experts = [
        ExpertTransform(
            rng.standard_normal((ff, hidden)) / np.sqrt(hidden),
            rng.standard_normal((hidden, ff)) / np.sqrt(ff),
        )
        for _ in range(n)
    ]
    return MoELayer(router=rng.standard_normal((n, hidden)), experts=experts, top_k=top_k)


def make_random_cache(rng, layer: MoELayer, n_tokens=64) -> CalibrationCache:
    inputs = rng.standard_normal((n_tokens, layer.hidden_dim)).astype(np.float32)
    return cache_from_inputs(layer, inputs)


PLANTED_KW = dict(hidden_dim=16, ff_dim=32, top_k=2)


def make_planted(seed, noise=0.05, sep=20.0, tokens_per_domain=64):
    """The n=8 planted fixture: 3 domains x 2 specialists + 2 generalists."""
    spec = PlantedSpec(
        n_domains=3,
        specialists_per_domain=2,
        n_generalists=2,
        duplicate_noise=noise,
        domain_separation=sep,
        seed=seed,
    )
    layer = generate_layer(spec, **PLANTED_KW)
    calib = generate_calibration(layer, spec, tokens_per_domain, seed=seed + 10_000)
    heldout = generate_calibration(layer, spec, tokens_per_domain, seed=seed + 20_000)
    return spec, layer, calib, heldout


def make_single_domain_cache(layer, spec, n_tokens, seed, domain=0) -> CalibrationCache:
    """Calibration tokens drawn from a single planted domain."""
    rng = np.random.default_rng(seed)
    centers = domain_centroids(spec, layer.hidden_dim)
    inputs = (centers[domain] + rng.standard_normal((n_tokens, layer.hidden_dim))).astype(
        np.float32
    )
    return cache_from_inputs(
        layer, inputs, source_domain=np.full(n_tokens, domain, dtype=np.int32)
    )


def make_duplicated_specialist_fixture(seed, sep=6.0, other_gain=1.5, noise=0.05,
                                       tokens_per_domain=64):
    """Planted layer where domain-0's duplicate pair ranks top on variability.

    Boosting the other domains' specialist router rows crushes the pair's
    off-domain gate mass, so experts 0 and 1 score decisively highest.
    """
    spec = PlantedSpec(
        n_domains=3,
        specialists_per_domain=2,
        n_generalists=2,
        duplicate_noise=noise,
        domain_separation=sep,
        seed=seed,
    )
    layer = generate_layer(spec, **PLANTED_KW)
    for e in range(layer.n_experts):
        if int(layer.specialist_domain[e]) > 0:
            layer.router[e] *= other_gain
    calib = generate_calibration(layer, spec, tokens_per_domain, seed=seed + 50_000)
    return spec, layer, calib


@pytest.fixture(scope="session")
def planted_fixture():
    return make_planted(seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
