"""Execution-plan search, request-level reconfiguration, and draft-method
selection.

``search_plan`` enumerates (drafter GPUs, verification config, window)
triples and keeps the one with the best modeled token generation speed,
pruning windows that cannot help because the drafting side would always
outpace verification.  ``reconfigure`` re-plans window and execution mode
per request for the slow tail of a batch.  ``build_ladder`` and
``initial_select`` pick the drafting method for a fresh batch from offline
profiles.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

from .costmodel import CostModel, tgs_coupled, tgs_decoupled
from .errors import ConfigError, InfeasiblePlanError
from .workload import MODE_COUPLED, MODE_DECOUPLED, Request

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExecutionPlan:
    """Chosen decoupled deployment: drafter GPUs, verify config, window."""

    method: str
    g_d: int
    g_v: str  # verification config id
    window: int
    tgs_estimate: float
    batch_per_group: int
    group_gpus: int


@dataclass(frozen=True)
class CoupledPlan:
    """Chosen serialized deployment: verify config + window.

    ``g_d`` is the parallelism of the colocated drafter, which shares the
    verifier's GPUs (no dedicated drafting hardware in coupled mode).
    """

    method: str
    g_v: str
    window: int
    tgs_estimate: float
    batch_per_group: int
    group_gpus: int
    g_d: int = 1


@dataclass(frozen=True)
class RequestPlan:
    request_id: int
    window: int
    mode: str  # MODE_COUPLED | MODE_DECOUPLED


@dataclass(frozen=True)
class DraftLadder:
    """speedup[method][i] = modeled speedup over plain decode at grid[i]."""

    methods: tuple[str, ...]
    grid: tuple[float, ...]
    speedup: dict[str, tuple[float, ...]]
    draft_cost: dict[str, float]  # reference draft step cost, for tie-breaks

    def lookup(self, method: str, rate: float) -> float:
        if method not in self.speedup:
            raise ConfigError(f"method {method!r} not in ladder")
        i = min(
            range(len(self.grid)), key=lambda j: (abs(self.grid[j] - rate), j)
        )
        return self.speedup[method][i]


def _ceil_ratio(num: float, den: float) -> float:
    if den == 0.0:
        return math.inf
    return math.ceil(num / den)


def admissible_windows(
    model: CostModel, method: str, g_d: int, config_id: str
) -> list[int]:
    """Windows passing the draft-vs-verify coefficient prune.

    A window is kept when w <= max(ceil(V'/D'), ceil(beta/alpha)); beyond
    that the drafter is the bottleneck on both the slope and the intercept
    side, so widening the window only adds mis-speculation waste.
    """
    d = model.draft_model(method, g_d)
    out = []
    for w in model.windows(config_id):
        v = model.verify_model(config_id, w)
        bound = max(
            _ceil_ratio(v.slope, d.slope), _ceil_ratio(v.intercept, d.intercept)
        )
        if w <= bound:
            out.append(w)
    return out


def group_batch(group_gpus: int, batch: int, total_gpus: int) -> int:
    """Per-group batch share when the cluster is tiled by identical groups."""
    return math.ceil(group_gpus * batch / total_gpus)


def search_plan(
    batch: int,
    model: CostModel,
    p: float,
    method: str | None = None,
) -> ExecutionPlan:
    """Enumerate decoupled deployments and return the fastest modeled one.

    Ties break toward fewer GPUs per group, then the smaller window.
    """
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"acceptance probability must be in [0,1], got {p}")
    if not model.configs:
        raise ConfigError("cost model declares no verification configurations")
    if method is None:
        method = model.methods()[0]

    best: ExecutionPlan | None = None
    for cfg in model.configs:
        max_gd = min(cfg.gpus, model.max_drafter_gpus(method))
        for g_d in range(1, max_gd + 1):
            group = g_d + cfg.gpus
            if group > model.total_gpus:
                continue
            b = group_batch(group, batch, model.total_gpus)
            for w in admissible_windows(model, method, g_d, cfg.id):
                tgs = tgs_decoupled(model, method, g_d, cfg.id, w, b, p)
                if tgs <= 0.0:
                    continue
                cand = ExecutionPlan(
                    method=method,
                    g_d=g_d,
                    g_v=cfg.id,
                    window=w,
                    tgs_estimate=tgs,
                    batch_per_group=b,
                    group_gpus=group,
                )
                if (
                    best is None
                    or tgs > best.tgs_estimate
                    or (
                        tgs == best.tgs_estimate
                        and (group, w) < (best.group_gpus, best.window)
                    )
                ):
                    best = cand
    if best is None:
        raise InfeasiblePlanError(
            "no feasible decoupled plan: every candidate had zero throughput"
        )
    return best


def search_plan_coupled(
    batch: int,
    model: CostModel,
    p: float,
    method: str | None = None,
) -> CoupledPlan:
    """Best serialized deployment; the drafter shares the verifier's GPUs,
    so it drafts at the group's full parallelism rather than on a dedicated
    device."""
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    if not model.configs:
        raise ConfigError("cost model declares no verification configurations")
    if method is None:
        method = model.methods()[0]

    best: CoupledPlan | None = None
    for cfg in model.configs:
        b = group_batch(cfg.gpus, batch, model.total_gpus)
        g_d = min(cfg.gpus, model.max_drafter_gpus(method))
        for w in model.windows(cfg.id):
            tgs = tgs_coupled(model, method, g_d, cfg.id, w, b, p)
            cand = CoupledPlan(
                method=method,
                g_v=cfg.id,
                window=w,
                tgs_estimate=tgs,
                batch_per_group=b,
                group_gpus=cfg.gpus,
                g_d=g_d,
            )
            if (
                best is None
                or tgs > best.tgs_estimate
                or (
                    tgs == best.tgs_estimate
                    and (cfg.gpus, w) < (best.group_gpus, best.window)
                )
            ):
                best = cand
    if best is None:
        raise InfeasiblePlanError("no feasible coupled plan")
    return best


def _argmax_window(windows: list[int], score) -> tuple[int, float]:
    best_w, best_tgs = windows[0], score(windows[0])
    for w in windows[1:]:
        tgs = score(w)
        if tgs > best_tgs:  # ties keep the smaller window
            best_w, best_tgs = w, tgs
    return best_w, best_tgs


def reconfigure(
    plan: ExecutionPlan,
    requests: list[Request],
    model: CostModel,
) -> list[RequestPlan]:
    """Re-plan window and execution mode for the slow half of a batch.

    Considers the requests whose estimated acceptance rate does not exceed
    the batch mean (non-strict, so a uniform batch is still re-planned),
    and for each picks the better of the best coupled and best decoupled
    single-request configuration under the plan's placement.  Requests with
    no recorded verification outcome are skipped.
    """
    if not requests:
        raise ConfigError("reconfigure needs a nonempty request list")
    eligible = []
    for r in requests:
        if r.rate_estimate.count() < 1:
            log.warning("request %d has no verification outcomes; skipped", r.id)
            continue
        eligible.append(r)
    if not eligible:
        return []
    mean = sum(r.rate_estimate.estimate() for r in eligible) / len(eligible)
    slow = [r for r in eligible if r.rate_estimate.estimate() <= mean]

    windows = admissible_windows(model, plan.method, plan.g_d, plan.g_v)
    if not windows:
        raise ConfigError("no admissible windows under the current plan")

    plans = []
    for r in sorted(slow, key=lambda r: r.id):
        p = r.rate_estimate.estimate()
        w_c, tgs_c = _argmax_window(
            windows,
            lambda w: tgs_coupled(model, plan.method, plan.g_d, plan.g_v, w, 1, p),
        )
        w_d, tgs_d = _argmax_window(
            windows,
            lambda w: tgs_decoupled(model, plan.method, plan.g_d, plan.g_v, w, 1, p),
        )
        if tgs_c > tgs_d:
            window, mode = w_c, MODE_COUPLED
        elif tgs_d > tgs_c:
            window, mode = w_d, MODE_DECOUPLED
        else:  # exact tie keeps the request's current mode
            mode = r.mode
            window = w_c if mode == MODE_COUPLED else w_d
        plans.append(RequestPlan(request_id=r.id, window=window, mode=mode))
    return plans


PLAIN_METHOD = "plain"


def build_ladder(
    methods: list[str],
    grid: list[float],
    model: CostModel,
    config_id: str | None = None,
) -> DraftLadder:
    """Offline (method, acceptance rate) -> speedup-over-plain-decode table.

    Speedups use the coupled closed form at batch size 1 with each method's
    best window; the baseline is one plain decode step.  The pseudo-method
    ``"plain"`` is the baseline itself, speedup 1 everywhere.
    """
    if not methods:
        raise ConfigError("ladder needs at least one method")
    if not grid:
        raise ConfigError("ladder needs a nonempty rate grid")
    if config_id is None:
        if not model.configs:
            raise ConfigError("cost model declares no verification configurations")
        config_id = model.configs[0].id
    if config_id not in model.plain:
        raise ConfigError(
            f"no plain-decode baseline model for config {config_id!r}"
        )
    plain_rate = 1.0 / model.plain_model(config_id).eval(1)

    speedup: dict[str, tuple[float, ...]] = {}
    draft_cost: dict[str, float] = {}
    for m in methods:
        if m == PLAIN_METHOD:
            speedup[m] = tuple(1.0 for _ in grid)
            draft_cost[m] = 0.0
            continue
        windows = admissible_windows(model, m, 1, config_id)
        if not windows:
            raise ConfigError(f"no admissible windows for method {m!r}")
        row = []
        for rate in grid:
            _, tgs = _argmax_window(
                windows,
                lambda w: tgs_coupled(model, m, 1, config_id, w, 1, rate),
            )
            row.append(tgs / plain_rate)
        speedup[m] = tuple(row)
        draft_cost[m] = model.draft_model(m, 1).eval(1)
    return DraftLadder(
        methods=tuple(methods),
        grid=tuple(grid),
        speedup=speedup,
        draft_cost=draft_cost,
    )


def initial_select(ladder: DraftLadder, historical_rates: dict[str, float]) -> str:
    """Pick the drafting method for a fresh batch from historical rates.

    Looks each method's rate up in the ladder and returns the method with
    the largest speedup; ties go to the cheaper drafter, then method order.
    """
    for m in historical_rates:
        if m not in ladder.speedup:
            raise ConfigError(f"method {m!r} not in ladder")
    best: str | None = None
    best_key: tuple[float, float, int] | None = None
    for idx, m in enumerate(ladder.methods):
        if m not in historical_rates:
            raise ConfigError(f"no historical rate for ladder method {m!r}")
        s = ladder.lookup(m, historical_rates[m])
        key = (-s, ladder.draft_cost[m], idx)
        if best_key is None or key < best_key:
            best, best_key = m, key
    assert best is not None
    return best
