"""Shared fixtures: the reference Monte Carlo configurations.

The heavy simulated campaigns are session-scoped so the acceptance criteria
and the unit tests that interrogate the same configurations share one run.
"""

from types import SimpleNamespace

import pytest

from slopesel import (
    RegressionSpec,
    build_regular_collection,
    estimate_min_penalty,
    simulate_batch,
)

REFERENCE_SEED = 20260809


@pytest.fixture(scope="session")
def smooth_bundle():
    """Smooth-truth reference configuration: sine target, n=2000, dyadic histograms."""
    spec = RegressionSpec("sine", {"amplitude": 1.0}, "constant", {"value": 0.3})
    collection = build_regular_collection(2000, {0}, 8)
    min_penalty = estimate_min_penalty(spec, collection, 2000, 300, REFERENCE_SEED)
    return SimpleNamespace(
        spec=spec,
        collection=collection,
        n=2000,
        seed=REFERENCE_SEED,
        min_penalty=min_penalty,
    )


@pytest.fixture(scope="session")
def homoscedastic_bundle():
    """Zero target with constant noise 0.5: n=1000, 500 replicates."""
    spec = RegressionSpec(
        "polynomial", {"coefficients": [0.0]}, "constant", {"value": 0.5}
    )
    collection = build_regular_collection(1000, {0}, 8)
    batch = simulate_batch(spec, collection, 1000, 500, REFERENCE_SEED)
    return SimpleNamespace(
        spec=spec,
        collection=collection,
        n=1000,
        replicates=500,
        seed=REFERENCE_SEED,
        batch=batch,
    )
