"""Plan search, pruning, per-request reconfiguration, and method selection."""

import logging

import numpy as np
import pytest

from specrollout.costmodel import (
    AffineLatencyModel,
    CostModel,
    VerifyConfig,
    tgs_decoupled,
)
from specrollout.errors import ConfigError, InfeasiblePlanError
from specrollout.planner import (
    ExecutionPlan,
    admissible_windows,
    build_ladder,
    group_batch,
    initial_select,
    reconfigure,
    search_plan,
    search_plan_coupled,
)
from specrollout.workload import MODE_COUPLED, MODE_DECOUPLED, Request

from conftest import flat_model


def test_group_batch_examples():
    assert group_batch(4, 48, 16) == 12
    assert group_batch(5, 48, 16) == 15
    assert group_batch(1, 1, 16) == 1


def test_admissible_windows_bound():
    # draft slope 0.5/intercept 1, verify slope 2/intercept 3.5 for all w:
    # bound = max(ceil(2/0.5), ceil(3.5/1)) = 4
    model = CostModel(
        draft={"m": {1: AffineLatencyModel(slope=0.5, intercept=1.0)}},
        verify={
            "v": {
                w: AffineLatencyModel(slope=2.0, intercept=3.5) for w in range(1, 9)
            }
        },
        plain={},
        total_gpus=4,
        configs=[VerifyConfig(id="v", gpus=1)],
    )
    assert admissible_windows(model, "m", 1, "v") == [1, 2, 3, 4]


def test_admissible_windows_zero_slope_keeps_all():
    model = flat_model(windows=range(2, 9))
    assert admissible_windows(model, "m", 1, "v") == list(range(2, 9))


def test_search_plan_zero_acceptance_picks_smallest_window():
    # p=0 commits 0.5 amortized tokens regardless of w, so the best window
    # simply minimizes the pipelined latency
    model = flat_model(windows=range(1, 7))
    plan = search_plan(1, model, 0.0, "m")
    assert plan.window == 1
    assert plan.g_d == 1


def test_search_plan_matches_unpruned_exhaustive():
    # 200 random window-monotone cost models; the w_max prune must never
    # change the winner (any mismatch is a prune-soundness counterexample)
    rng = np.random.default_rng(12345)
    for trial in range(200):
        model, p, batch = _random_model(rng)
        try:
            plan = search_plan(batch, model, p, "m")
        except InfeasiblePlanError:
            assert _brute_force(batch, model, p, "m") is None
            continue
        expected = _brute_force(batch, model, p, "m")
        got = (
            plan.g_d, plan.g_v, plan.window, plan.tgs_estimate,
            plan.batch_per_group, plan.group_gpus,
        )
        assert got == expected, f"prune-soundness counterexample, trial {trial}"


def _random_model(rng):
    """Random cluster: 1-3 verify configs, verify cost affine in the window
    (slope and intercept grow with w, as fitted verification graphs do)."""
    n_cfg = int(rng.integers(1, 4))
    total = int(rng.integers(6, 33))
    configs, verify = [], {}
    for i in range(n_cfg):
        gpus = int(rng.integers(1, min(8, total) + 1))
        cid = f"c{i}"
        configs.append(VerifyConfig(id=cid, gpus=gpus))
        w_hi = int(rng.integers(4, 13))
        s0, s1 = rng.uniform(0.0, 0.3), rng.uniform(0.005, 0.2)
        i0, i1 = rng.uniform(0.5, 15.0), rng.uniform(0.0, 1.5)
        verify[cid] = {
            w: AffineLatencyModel(
                slope=float(s0 + s1 * w), intercept=float(i0 + i1 * w)
            )
            for w in range(1, w_hi + 1)
        }
    max_gd = int(rng.integers(1, 5))
    draft = {
        "m": {
            g: AffineLatencyModel(
                slope=float(rng.uniform(0.005, 0.5)),
                intercept=float(rng.uniform(0.05, 5.0)),
            )
            for g in range(1, max_gd + 1)
        }
    }
    model = CostModel(
        draft=draft, verify=verify, plain={}, total_gpus=total, configs=configs
    )
    return model, float(rng.uniform(0.0, 1.0)), int(rng.integers(1, 300))


def _brute_force(batch, model, p, method):
    best = None
    for cfg in model.configs:
        max_gd = min(cfg.gpus, model.max_drafter_gpus(method))
        for g_d in range(1, max_gd + 1):
            group = g_d + cfg.gpus
            if group > model.total_gpus:
                continue
            b = group_batch(group, batch, model.total_gpus)
            for w in model.windows(cfg.id):  # every window, no prune
                tgs = tgs_decoupled(model, method, g_d, cfg.id, w, b, p)
                if tgs <= 0.0:
                    continue
                cand = (g_d, cfg.id, w, tgs, b, group)
                if (
                    best is None
                    or tgs > best[3]
                    or (tgs == best[3] and (group, w) < (best[5], best[2]))
                ):
                    best = cand
    return best


def test_search_plan_validation(model):
    with pytest.raises(ConfigError):
        search_plan(0, model, 0.5)
    with pytest.raises(ConfigError):
        search_plan(4, model, 1.5)


def test_search_plan_coupled_shipped_scenario(model):
    # the shipped calibration: coupled groups are the 4-GPU verify config
    plan = search_plan_coupled(48, model, 0.75, "draft-0.5b")
    assert plan.group_gpus == 4
    assert plan.batch_per_group == 12


# -- reconfigure ---------------------------------------------------------


def _request(rid, proposed, accepted):
    r = Request(id=rid, prompt_len=1, true_len=100, latent_accept={"m": 0.5})
    r.rate_estimate.record(proposed, accepted)
    return r


PLAN = ExecutionPlan(
    method="m", g_d=1, g_v="v", window=4, tgs_estimate=1.0,
    batch_per_group=1, group_gpus=2,
)


def test_reconfigure_high_estimate_decoupled_max_window():
    # estimate 1.0 on the flat model: pipelined speed w/16 grows with w up
    # to the largest window (8), and beats serialized (w+1)/(w+16)
    model = flat_model()
    plans = reconfigure(PLAN, [_request(0, 4, 4)], model)
    assert len(plans) == 1
    assert plans[0].request_id == 0
    assert plans[0].window == 8
    assert plans[0].mode == MODE_DECOUPLED


def test_reconfigure_low_estimate_coupled_small_window():
    # estimate 0: pipelined commits 0.5 per 16 ms window; serialized commits
    # the corrected token every w+16 ms, best at the smallest window
    model = flat_model()
    plans = reconfigure(PLAN, [_request(0, 4, 0)], model)
    assert len(plans) == 1
    assert plans[0].window == 2
    assert plans[0].mode == MODE_COUPLED


def test_reconfigure_only_replans_at_or_below_mean():
    model = flat_model()
    plans = reconfigure(
        PLAN, [_request(0, 4, 0), _request(1, 4, 4)], model
    )
    assert [p.request_id for p in plans] == [0]


def test_reconfigure_skips_requests_without_outcomes(caplog):
    model = flat_model()
    fresh = Request(id=3, prompt_len=1, true_len=100, latent_accept={"m": 0.5})
    with caplog.at_level(logging.WARNING):
        plans = reconfigure(PLAN, [fresh], model)
    assert plans == []
    assert "no verification outcomes" in caplog.text


def test_reconfigure_validation():
    with pytest.raises(ConfigError):
        reconfigure(PLAN, [], flat_model())


# -- ladder and initial selection ----------------------------------------


def test_ladder_hand_computed_entry():
    # rate 0: serialized commits 1 token per (2*1 + 16) ms at the best
    # window w=2; plain decodes 1 token per 8 ms -> speedup 8/18
    model = flat_model()
    ladder = build_ladder(["m", "plain"], [0.0], model)
    assert ladder.speedup["m"][0] == pytest.approx(8.0 / 18.0)
    assert ladder.speedup["plain"][0] == 1.0


def test_ladder_lookup_nearest():
    model = flat_model()
    ladder = build_ladder(["m"], [0.1, 0.5, 0.9], model)
    assert ladder.lookup("m", 0.48) == ladder.speedup["m"][1]
    with pytest.raises(ConfigError):
        ladder.lookup("x", 0.5)


def test_initial_select_prefers_faster_method():
    model = flat_model()
    ladder = build_ladder(["m", "plain"], [0.0, 0.9], model)
    # at rate 0.9 speculation beats plain decode; at rate 0 it does not
    assert initial_select(ladder, {"m": 0.9, "plain": 0.9}) == "m"
    assert initial_select(ladder, {"m": 0.0, "plain": 0.0}) == "plain"


def test_initial_select_tie_breaks_by_method_order():
    model = flat_model()
    model.draft["m2"] = dict(model.draft["m"])  # identical drafter
    ladder = build_ladder(["m", "m2"], [0.5], model)
    assert initial_select(ladder, {"m": 0.5, "m2": 0.5}) == "m"


def test_initial_select_requires_rates():
    model = flat_model()
    ladder = build_ladder(["m"], [0.5], model)
    with pytest.raises(ConfigError):
        initial_select(ladder, {})
    with pytest.raises(ConfigError):
        initial_select(ladder, {"m": 0.5, "ghost": 0.5})
