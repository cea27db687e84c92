"""Best-of-N assignment: hand traces, policies, and randomized invariants."""

import numpy as np
import pytest

from specrollout.bon import (
    BonAssignment,
    ClusterState,
    ScaleCost,
    assign_bon,
    release_pair,
    scale_charge,
)
from specrollout.costmodel import AffineLatencyModel
from specrollout.errors import ConfigError
from specrollout.workload import Request


def _request(rid, rate):
    r = Request(id=rid, prompt_len=1, true_len=100, latent_accept={"d": rate})
    r.rate_estimate.record(10, int(round(rate * 10)))
    return r


def test_greedy_hand_trace():
    # 3 requests (rates 0.2 < 0.5 < 0.8), methods [m1, m2], freed workers
    # [A, B], b_max=2.  A joins m1 (fewest, ties by method order), B joins
    # m2.  Each method packs the two slowest requests; request 2 is not
    # served by anyone.
    reqs = [_request(0, 0.2), _request(1, 0.5), _request(2, 0.8)]
    state = ClusterState(b_max=2)
    out = assign_bon(reqs, ["m1", "m2"], ["A", "B"], state)
    assert out.pairs == {
        (0, "m1"): "A",
        (1, "m1"): "A",
        (0, "m2"): "B",
        (1, "m2"): "B",
    }
    assert state.load == {"A": 2, "B": 2}
    assert state.method_workers == {"m1": ["A"], "m2": ["B"]}
    assert bool(out)


def test_greedy_skips_active_pairs():
    # request 0 already drafts with m1 somewhere, so m1's slot goes to the
    # next-slowest candidates
    reqs = [_request(0, 0.2), _request(1, 0.5), _request(2, 0.8)]
    state = ClusterState(b_max=2)
    state.active_pairs.add((0, "m1"))
    out = assign_bon(reqs, ["m1"], ["A"], state)
    assert out.pairs == {(1, "m1"): "A", (2, "m1"): "A"}


def test_dfs_gives_slowest_request_every_method_first():
    reqs = [_request(0, 0.2), _request(1, 0.5), _request(2, 0.8)]
    state = ClusterState(b_max=1)
    out = assign_bon(reqs, ["m1", "m2"], ["A", "B"], state, policy="dfs")
    # b_max=1: request 0 takes both workers before request 1 sees any slot
    assert out.pairs == {(0, "m1"): "A", (0, "m2"): "B"}


def test_freed_workers_balance_methods():
    state = ClusterState(b_max=1)
    assign_bon([], ["m1", "m2"], ["A", "B", "C"], state)
    counts = sorted(len(ws) for ws in state.method_workers.values())
    assert counts == [1, 2]
    assert state.method_workers["m1"][0] == "A"  # ties follow method order


def test_empty_assignment_is_falsy():
    state = ClusterState(b_max=2)
    out = assign_bon([], ["m1"], [], state)
    assert not out
    assert out.pairs == {}


def test_assign_bon_validation():
    state = ClusterState(b_max=2)
    with pytest.raises(ConfigError):
        assign_bon([], [], ["A"], state)
    with pytest.raises(ConfigError):
        assign_bon([], ["m"], ["A"], state, policy="bogus")
    with pytest.raises(ConfigError):
        ClusterState(b_max=0)


def test_release_pair_round_trip():
    reqs = [_request(0, 0.2)]
    state = ClusterState(b_max=1)
    out = assign_bon(reqs, ["m1"], ["A"], state)
    assert out.pairs == {(0, "m1"): "A"}
    release_pair(state, 0, "m1", "A")
    assert state.load["A"] == 0
    assert (0, "m1") not in state.active_pairs
    # the slot is reusable afterwards
    out = assign_bon(reqs, ["m1"], [], state)
    assert out.pairs == {(0, "m1"): "A"}


@pytest.mark.parametrize("policy", ["greedy", "dfs"])
def test_randomized_capacity_and_balance(policy):
    rng = np.random.default_rng(999)
    for trial in range(250):
        n_req = int(rng.integers(0, 12))
        n_methods = int(rng.integers(1, 4))
        n_freed = int(rng.integers(0, 6))
        b_max = int(rng.integers(1, 5))
        methods = [f"m{i}" for i in range(n_methods)]
        freed = [f"w{trial}_{i}" for i in range(n_freed)]
        reqs = [_request(i, float(rng.uniform(0, 1))) for i in range(n_req)]
        state = ClusterState(b_max=b_max)
        out = assign_bon(reqs, methods, freed, state, policy=policy)

        # capacity: no worker exceeds b_max
        assert all(0 <= load <= b_max for load in state.load.values())
        # balance: freed workers joined least-staffed methods, so worker
        # counts per method differ by at most one
        counts = [len(ws) for ws in state.method_workers.values()]
        assert max(counts) - min(counts) <= 1
        # consistency: every pair is booked exactly once and loads add up
        assert len(set(out.pairs)) == len(out.pairs)
        per_worker: dict[str, int] = {}
        for (rid, method), worker in out.pairs.items():
            assert worker in state.method_workers[method]
            assert (rid, method) in state.active_pairs
            per_worker[worker] = per_worker.get(worker, 0) + 1
        for worker, load in per_worker.items():
            assert state.load[worker] == load
        # work conservation (greedy): a method with spare capacity has every
        # request booked on it
        if policy == "greedy":
            for method in methods:
                spare = any(
                    state.load[w] < b_max for w in state.method_workers[method]
                )
                if spare:
                    assert all(
                        (r.id, method) in state.active_pairs for r in reqs
                    )


def test_scale_charge_arithmetic():
    cost = ScaleCost(
        model_scale_ms=50.0,
        kv_scale=AffineLatencyModel(slope=0.01, intercept=2.0),
    )
    r = _request(0, 0.5)
    r.position = 300
    assert scale_charge(r, cost) == pytest.approx(50.0 + 2.0 + 3.0)
    r.position = 0  # no KV yet: only the flat parts
    assert scale_charge(r, cost) == pytest.approx(52.0)
    with pytest.raises(ConfigError):
        ScaleCost(model_scale_ms=-1.0, kv_scale=cost.kv_scale)


def test_bon_assignment_frozen():
    out = BonAssignment(pairs={(1, "m"): "w"})
    assert bool(out)
