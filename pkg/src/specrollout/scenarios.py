"""Shipped default scenario.

The latency coefficients below are calibration artifacts chosen so that the
desk-scale simulator reproduces the qualitative regimes of real clusters:
verification is memory-bound at small batches and compute-bound at large
ones (so serialized speculation loses its advantage as the batch grows),
and drafting on a single GPU is cheap per token at batch 1 but scales worse
than the tensor-parallel verifier.  They are not measurements.
"""

from __future__ import annotations

from .bon import ScaleCost
from .costmodel import AffineLatencyModel, CostModel, VerifyConfig
from .workload import TraceSpec

TOTAL_GPUS = 16
VERIFY_CONFIG = "tp4"
# verification graphs are shipped for multi-token windows only; single-token
# decode is the plain model's job
WINDOWS = tuple(range(2, 13))

# drafting methods: (slope, intercept, Beta acceptance params); draft models
# are too small to shard, so their latency is flat in the GPU count
METHODS = {
    "draft-0.5b": {"slope": 0.08, "intercept": 1.12, "beta": (3.0, 1.0)},
    "ngram": {"slope": 0.004, "intercept": 0.05, "beta": (2.0, 2.0)},
    "draft-1.5b": {"slope": 0.12, "intercept": 2.0, "beta": (12.0, 1.6)},
}

DEFAULT_METHOD = "draft-0.5b"
BON_METHODS = ("ngram", "draft-1.5b")

PLAIN_SLOPE = 0.05
PLAIN_INTERCEPT = 5.0
VERIFY_SLOPE_PER_TOKEN = 0.09  # compute-bound: slope grows with the window
VERIFY_INTERCEPT_BASE = 5.0
VERIFY_INTERCEPT_PER_TOKEN = 0.1


def default_cost_model() -> CostModel:
    draft = {}
    for method, spec in METHODS.items():
        draft[method] = {
            g: AffineLatencyModel(slope=spec["slope"], intercept=spec["intercept"])
            for g in range(1, 5)
        }
    verify = {
        VERIFY_CONFIG: {
            w: AffineLatencyModel(
                slope=VERIFY_SLOPE_PER_TOKEN * w,
                intercept=VERIFY_INTERCEPT_BASE + VERIFY_INTERCEPT_PER_TOKEN * w,
            )
            for w in WINDOWS
        }
    }
    plain = {
        VERIFY_CONFIG: AffineLatencyModel(
            slope=PLAIN_SLOPE, intercept=PLAIN_INTERCEPT
        )
    }
    return CostModel(
        draft=draft,
        verify=verify,
        plain=plain,
        total_gpus=TOTAL_GPUS,
        configs=[VerifyConfig(id=VERIFY_CONFIG, gpus=4, parallelism="tp")],
    )


def default_trace_spec(batch: int = 48, seed: int = 0) -> TraceSpec:
    return TraceSpec(
        batch_size=batch,
        length_mu=5.0,
        length_sigma=0.9,
        length_cap=2000,
        prompt_len_min=128,
        prompt_len_max=1024,
        accept_beta={m: spec["beta"] for m, spec in METHODS.items()},
        seed=seed,
    )


def default_scale_cost() -> ScaleCost:
    return ScaleCost(
        model_scale_ms=50.0,
        kv_scale=AffineLatencyModel(slope=0.01, intercept=0.0),
    )


def estimator_priors() -> dict[str, float]:
    """Historical mean acceptance per method (the Beta means)."""
    return {
        m: spec["beta"][0] / (spec["beta"][0] + spec["beta"][1])
        for m, spec in METHODS.items()
    }
