"""Shared fixtures: the shipped calibrated scenario and small helpers."""

from __future__ import annotations

import pytest

from specrollout import scenarios
from specrollout.costmodel import AffineLatencyModel, CostModel, VerifyConfig
from specrollout.sim import SimConfig, simulate
from specrollout.workload import gen_trace


@pytest.fixture(scope="session")
def model():
    return scenarios.default_cost_model()


@pytest.fixture(scope="session")
def priors():
    return scenarios.estimator_priors()


def make_trace(batch: int, seed: int, sigma: float | None = None):
    spec = scenarios.default_trace_spec(batch=batch, seed=seed)
    if sigma is not None:
        from specrollout.workload import TraceSpec

        spec = TraceSpec(**{**spec.__dict__, "length_sigma": sigma})
    return gen_trace(spec)


def run_sim(model, trace, seed, **kwargs):
    opts = dict(
        trace=trace,
        model=model,
        method=scenarios.DEFAULT_METHOD,
        seed=seed,
        scale_cost=scenarios.default_scale_cost(),
        estimator_priors=scenarios.estimator_priors(),
    )
    opts.update(kwargs)
    return simulate(SimConfig(**opts))


def flat_model(
    draft_intercept: float = 1.0,
    verify_intercept: float = 16.0,
    plain_intercept: float = 8.0,
    windows=range(2, 9),
    total_gpus: int = 8,
) -> CostModel:
    """Batch-independent latencies: draft 1 token costs ``draft_intercept``
    ms, verifying any window ``verify_intercept`` ms.  Slope zero disables
    the window prune, so every configured window is admissible."""
    return CostModel(
        draft={"m": {1: AffineLatencyModel(slope=0.0, intercept=draft_intercept)}},
        verify={
            "v": {
                w: AffineLatencyModel(slope=0.0, intercept=verify_intercept)
                for w in windows
            }
        },
        plain={"v": AffineLatencyModel(slope=0.0, intercept=plain_intercept)},
        total_gpus=total_gpus,
        configs=[VerifyConfig(id="v", gpus=1)],
    )
