"""Trace synthesis, serialization, and the acceptance-rate estimator."""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from specrollout.errors import ConfigError, TraceFormatError
from specrollout.workload import (
    AcceptanceEstimator,
    Request,
    TraceSpec,
    gen_trace,
    load_trace,
    save_trace,
)

SPEC = TraceSpec(batch_size=32, accept_beta={"d": (3.0, 1.0), "n": (2.0, 2.0)})


def test_gen_trace_deterministic():
    a = gen_trace(SPEC)
    b = gen_trace(SPEC)
    assert [(r.id, r.prompt_len, r.true_len, r.latent_accept) for r in a] == [
        (r.id, r.prompt_len, r.true_len, r.latent_accept) for r in b
    ]


def test_gen_trace_seed_sensitivity():
    a = gen_trace(SPEC)
    b = gen_trace(TraceSpec(**{**SPEC.__dict__, "seed": 1}))
    assert [r.true_len for r in a] != [r.true_len for r in b]


def test_gen_trace_field_ranges():
    for r in gen_trace(TraceSpec(batch_size=200, accept_beta={"d": (1.0, 1.0)})):
        assert 1 <= r.true_len <= 2000
        assert 128 <= r.prompt_len <= 1024
        assert 0.0 <= r.latent_accept["d"] <= 1.0


def test_censored_length_mean_matches_oracle():
    # E[min(X, cap)] for lognormal X, ignoring the integer rounding and the
    # clamp at 1 (both negligible at these parameters)
    mu, sigma, cap = 5.0, 0.9, 2000
    expected = math.exp(mu + sigma**2 / 2) * norm.cdf(
        (math.log(cap) - mu - sigma**2) / sigma
    ) + cap * (1 - norm.cdf((math.log(cap) - mu) / sigma))
    trace = gen_trace(TraceSpec(batch_size=20_000, accept_beta={"d": (2.0, 2.0)}))
    mean = sum(r.true_len for r in trace) / len(trace)
    assert abs(mean - expected) / expected < 0.05


def test_trace_round_trip(tmp_path):
    trace = gen_trace(SPEC)
    path = tmp_path / "trace.jsonl"
    save_trace(trace, path)
    loaded = load_trace(path)
    assert [(r.id, r.prompt_len, r.true_len, r.latent_accept) for r in trace] == [
        (r.id, r.prompt_len, r.true_len, r.latent_accept) for r in loaded
    ]


@pytest.mark.parametrize(
    "line,fragment",
    [
        ("{not json", "invalid JSON"),
        ('{"id": 0, "prompt_len": 1, "true_len": 5}', "missing fields: accept"),
        ('{"id": 0, "prompt_len": 1, "true_len": 0, "accept": {}}', "true_len"),
    ],
)
def test_load_trace_errors(tmp_path, line, fragment):
    path = tmp_path / "bad.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(TraceFormatError, match="line 1"):
        try:
            load_trace(path)
        except TraceFormatError as exc:
            assert fragment in str(exc)
            raise


def test_load_trace_duplicate_id(tmp_path):
    rec = '{"id": 7, "prompt_len": 1, "true_len": 5, "accept": {"d": 0.5}}'
    path = tmp_path / "dup.jsonl"
    path.write_text(rec + "\n" + rec + "\n")
    with pytest.raises(TraceFormatError, match="duplicate request id 7"):
        load_trace(path)


def test_request_validation():
    with pytest.raises(TraceFormatError):
        Request(id=0, prompt_len=1, true_len=3, latent_accept={"d": 1.5})
    with pytest.raises(TraceFormatError):
        Request(id=0, prompt_len=1, true_len=3, latent_accept={}, mode="X")


def test_fresh_copy_resets_state():
    r = Request(id=0, prompt_len=1, true_len=10, latent_accept={"d": 0.5})
    r.position = 4
    r.window = 6
    r.rate_estimate.record(4, 2)
    fresh = r.fresh_copy(estimator_window=8, prior=0.7)
    assert (fresh.position, fresh.window) == (0, 1)
    assert fresh.rate_estimate.count() == 0
    assert fresh.rate_estimate.estimate() == 0.7
    assert r.position == 4  # the original is untouched


# -- estimator -----------------------------------------------------------


def test_estimator_prior_until_first_outcome():
    est = AcceptanceEstimator(window=4, prior=0.3)
    assert est.estimate() == 0.3
    est.record(4, 2)
    assert est.estimate() == 0.5


def test_estimator_ring_hand_trace():
    # K=2: the third outcome evicts the first, leaving (4,4) and (2,1)
    est = AcceptanceEstimator(window=2)
    est.record(4, 2).record(4, 4).record(2, 1)
    assert est.count() == 2
    assert est.estimate() == pytest.approx(5 / 6)


def test_estimator_zero_proposed_keeps_prior():
    est = AcceptanceEstimator(window=4, prior=0.25)
    est.record(0, 0)
    assert est.estimate() == 0.25


def test_estimator_rejects_invalid():
    est = AcceptanceEstimator()
    with pytest.raises(ValueError):
        est.record(2, 3)
    with pytest.raises(ValueError):
        est.record(-1, 0)
    with pytest.raises(ConfigError):
        AcceptanceEstimator(window=0)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, 16), st.integers(0, 16)).map(
            lambda t: (max(t), min(t))
        ),
        max_size=50,
    ),
    st.integers(1, 8),
)
def test_estimator_bounded(outcomes, window):
    est = AcceptanceEstimator(window=window)
    for proposed, accepted in outcomes:
        est.record(proposed, accepted)
        assert 0.0 <= est.estimate() <= 1.0
    assert est.count() == min(len(outcomes), window)


def test_trace_spec_validation():
    with pytest.raises(ConfigError):
        TraceSpec(batch_size=4, length_sigma=0.0).validate()
    with pytest.raises(ConfigError):
        TraceSpec(batch_size=4, accept_beta={}).validate()
    with pytest.raises(ConfigError):
        TraceSpec(batch_size=4, accept_beta={"d": (0.0, 1.0)}).validate()
    with pytest.raises(ConfigError):
        TraceSpec(batch_size=4, prompt_len_min=10, prompt_len_max=5).validate()
