"""Discrete-event, virtual-time rollout simulator.

The cluster is tiled into identical worker groups; each group executes its
batch share in rounds.  A round prices the drafting side token-by-token and
the verification side per window using the fitted affine models, overlapping
the two for pipelined (decoupled) execution and serializing them otherwise.
Verification is exact-match: a drafted token is committed only when it equals
the target model's own token at that position, so every policy stack commits
byte-identical sequences.

Token truth and acceptance draws are pure functions of
(seed, request, position[, method]), which makes whole simulations
deterministic and lets replicas race without re-rolling history.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Optional

from . import bon as bon_mod
from . import planner as planner_mod
from .costmodel import (
    CostModel,
    expected_tokens_coupled,
    tgs_coupled,
    tgs_decoupled,
)
from .errors import ConfigError
from .streams import stream
from .workload import MODE_COUPLED, MODE_DECOUPLED, Request

POLICY_PLAIN = "plain"
POLICY_COUPLED = "coupled"
POLICY_DISAGGREGATED = "disaggregated"
POLICY_DECOUPLED = "decoupled"
POLICIES = (POLICY_PLAIN, POLICY_COUPLED, POLICY_DISAGGREGATED, POLICY_DECOUPLED)

_VOCAB = 50_257
_DRAW_CHUNK = 256  # acceptance/token draws are materialized in chunks


def generate_true_sequence(request_id: int, true_len: int, seed: int) -> list[int]:
    """The target model's full output for a request; pure in (seed, id)."""
    out: list[int] = []
    pos = 0
    while pos < true_len:
        n = min(_DRAW_CHUNK, true_len - pos)
        chunk = stream(seed, request_id, "tokens", pos // _DRAW_CHUNK).integers(
            0, _VOCAB, size=_DRAW_CHUNK
        )
        out.extend(int(t) for t in chunk[:n])
        pos += n
    return out


@dataclass(frozen=True)
class VerificationOutcome:
    """One verified window, with its waste accounting."""

    time_ms: float
    worker: str
    request_id: int
    method: str
    mode: str  # MODE_COUPLED (pipeline depth 1) or MODE_DECOUPLED (depth 2)
    # the window governing this proposal; equals the request's configured
    # w_r unless a reconfiguration changed w_r while the window was in
    # flight, in which case the drafted size is reported
    window: int
    proposed: int
    accepted: int
    committed: int
    wasted: int
    full_accept: bool


@dataclass
class RequestMetrics:
    id: int
    true_len: int
    finish_ms: float
    committed: int
    drafted: int
    wasted: int
    windows: int
    partial_events: int
    winner: str
    tokens_per_window: float  # amortized, pairs a partial accept with its stall


@dataclass
class WorkerMetrics:
    id: str
    role: str  # incumbent | replica
    busy_ms: float
    idle_ms: float
    drained_ms: float


@dataclass
class SimMetrics:
    policy: str
    seed: int
    makespan_ms: float
    total_committed: int
    total_wasted: int
    mean_tgs: float  # committed tokens per ms of makespan
    requests: dict[int, RequestMetrics]
    workers: dict[str, WorkerMetrics]
    outcomes: list[VerificationOutcome]
    events: list[dict]
    sequences: dict[int, list[int]]
    bon_assign_count: int = 0
    reconfig_count: int = 0


@dataclass
class SimConfig:
    trace: list[Request]
    model: CostModel
    policy: str
    method: str | None = None
    plan: Optional[planner_mod.ExecutionPlan] = None
    coupled_plan: Optional[planner_mod.CoupledPlan] = None
    baseline_config: str | None = None
    reconfig: bool = False
    bon: bool = False
    bon_methods: tuple[str, ...] = ()
    bon_policy: str = "greedy"
    b_max: int = 8
    scale_cost: Optional[bon_mod.ScaleCost] = None
    bonus_token: bool = False
    seed: int = 0
    prepare_learn_ms: float = 0.0
    reconfig_interval: int = 1000
    estimator_window: int = 64
    estimator_priors: dict[str, float] = field(default_factory=dict)
    log_draft_events: bool = False

    def validate(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.policy == POLICY_PLAIN and (self.reconfig or self.bon):
            raise ConfigError("reconfig/bon flags need a speculation policy")
        if self.bon and not self.bon_methods:
            raise ConfigError("bon enabled but bon_methods is empty")
        if self.reconfig_interval < 1:
            raise ConfigError("reconfig_interval must be >= 1")


# ---------------------------------------------------------------------------


class _ReqRuntime:
    """Shared per-request state across all executors serving it."""

    __slots__ = (
        "req", "true_len", "finished", "finish_ms", "winner", "sequence",
        "committed_high", "drafted", "wasted", "windows", "partial_events",
        "amortized_sum", "truth", "accept_cache",
    )

    def __init__(self, req: Request):
        self.req = req
        self.true_len = req.true_len
        self.finished = False
        self.finish_ms = 0.0
        self.winner = ""
        self.sequence: list[Optional[int]] = [None] * req.true_len
        self.committed_high = 0  # longest committed prefix across executors
        self.drafted = 0
        self.wasted = 0
        self.windows = 0
        self.partial_events = 0
        self.amortized_sum = 0.0
        self.truth: dict[int, list[int]] = {}  # chunk index -> tokens
        self.accept_cache: dict[tuple[str, int], list[float]] = {}


class _Sim:
    def __init__(self, config: SimConfig):
        config.validate()
        self.cfg = config
        self.model = config.model
        self.seed = config.seed
        methods = self.model.methods()
        if not methods:
            raise ConfigError("cost model has no drafting methods")
        self.method = config.method or methods[0]
        if self.method not in self.model.draft:
            raise ConfigError(f"no draft models for method {self.method!r}")
        self.events: list[dict] = []
        self.outcomes: list[VerificationOutcome] = []
        self.bon_assign_count = 0
        self.reconfig_count = 0
        self._resolve_plan()
        self._build_requests()
        self._build_workers()
        self.bon_state = bon_mod.ClusterState(b_max=config.b_max)
        self._replica_windows: dict[str, int] = {}
        self._replica_seq = 0

    # -- setup -----------------------------------------------------------

    def _prior(self, method: str) -> float:
        return self.cfg.estimator_priors.get(method, 0.5)

    def _resolve_plan(self) -> None:
        cfg = self.cfg
        B = max(len(cfg.trace), 1)
        if cfg.policy == POLICY_DECOUPLED:
            self.plan = cfg.plan or planner_mod.search_plan(
                B, self.model, self._prior(self.method), self.method
            )
            self.model.verify_model(self.plan.g_v, self.plan.window)
            self.model.draft_model(self.method, self.plan.g_d)
        elif cfg.policy == POLICY_DISAGGREGATED:
            # serialized schedule of the coupled plan, but with the drafter
            # moved to a dedicated GPU: same window, one extra GPU per group
            # sitting idle during verification (and vice versa)
            if cfg.plan is not None:
                self.plan = cfg.plan
            else:
                cp = planner_mod.search_plan_coupled(
                    B, self.model, self._prior(self.method), self.method
                )
                group = self.model.config(cp.g_v).gpus + 1
                self.plan = planner_mod.ExecutionPlan(
                    method=cp.method,
                    g_d=1,
                    g_v=cp.g_v,
                    window=cp.window,
                    tgs_estimate=cp.tgs_estimate,
                    batch_per_group=planner_mod.group_batch(
                        group, B, self.model.total_gpus
                    ),
                    group_gpus=group,
                )
            self.model.verify_model(self.plan.g_v, self.plan.window)
            self.model.draft_model(self.method, self.plan.g_d)
        elif cfg.policy == POLICY_COUPLED:
            self.coupled_plan = cfg.coupled_plan or planner_mod.search_plan_coupled(
                B, self.model, self._prior(self.method), self.method
            )
            self.model.verify_model(self.coupled_plan.g_v, self.coupled_plan.window)
            self.model.draft_model(self.method, self.coupled_plan.g_d)
        else:
            config_id = cfg.baseline_config or (
                self.model.configs[0].id if self.model.configs else None
            )
            if config_id is None:
                raise ConfigError("plain policy needs a verification config")
            self.model.plain_model(config_id)
            self.plain_config = config_id

    def _build_requests(self) -> None:
        self.reqs: dict[int, _ReqRuntime] = {}
        self.order: list[int] = []
        for r in self.cfg.trace:
            if r.id in self.reqs:
                raise ConfigError(f"duplicate request id {r.id} in trace")
            fresh = r.fresh_copy(
                self.cfg.estimator_window, self._prior(self.method)
            )
            if self.cfg.policy in (POLICY_DECOUPLED, POLICY_DISAGGREGATED):
                fresh.window = self.plan.window
                fresh.mode = (
                    MODE_DECOUPLED
                    if self.cfg.policy == POLICY_DECOUPLED
                    else MODE_COUPLED
                )
            elif self.cfg.policy == POLICY_COUPLED:
                fresh.window = self.coupled_plan.window
                fresh.mode = MODE_COUPLED
            self.reqs[r.id] = _ReqRuntime(fresh)
            self.order.append(r.id)

    def _build_workers(self) -> None:
        cfg = self.cfg
        if cfg.policy in (POLICY_DECOUPLED, POLICY_DISAGGREGATED):
            group = self.plan.group_gpus
            self.worker_cfg = self.plan.g_v
            self.worker_gd = self.plan.g_d
        elif cfg.policy == POLICY_COUPLED:
            group = self.coupled_plan.group_gpus
            self.worker_cfg = self.coupled_plan.g_v
            self.worker_gd = self.coupled_plan.g_d
        else:
            group = self.model.config(self.plain_config).gpus
            self.worker_cfg = self.plain_config
            self.worker_gd = 1
        n_workers = self.model.total_gpus // group
        if n_workers < 1:
            raise ConfigError(
                f"group of {group} GPUs does not fit the {self.model.total_gpus}-GPU cluster"
            )
        self.executors: dict[str, _Executor] = {}
        for i in range(n_workers):
            wid = f"w{i}"
            self.executors[wid] = _Executor(
                sim=self, worker_id=wid, role="incumbent",
                kind=cfg.policy, method=self.method,
                config_id=self.worker_cfg, g_d=self.worker_gd,
            )
        for idx, rid in enumerate(self.order):
            wid = f"w{idx % n_workers}"
            self.executors[wid].add_slot(self.reqs[rid], ready_ms=0.0, position=0)

    # -- ground truth ----------------------------------------------------

    def true_token(self, rt: _ReqRuntime, pos: int) -> int:
        chunk = pos // _DRAW_CHUNK
        if chunk not in rt.truth:
            raw = stream(self.seed, rt.req.id, "tokens", chunk).integers(
                0, _VOCAB, size=_DRAW_CHUNK
            )
            rt.truth[chunk] = [int(t) for t in raw]
        return rt.truth[chunk][pos % _DRAW_CHUNK]

    def accept_draw(self, rt: _ReqRuntime, method: str, pos: int) -> bool:
        """Bernoulli(p_{r,method}) draw keyed by (seed, request, pos, method)."""
        chunk = pos // _DRAW_CHUNK
        key = (method, chunk)
        if key not in rt.accept_cache:
            raw = stream(self.seed, rt.req.id, "accept_draw", method, chunk).random(
                _DRAW_CHUNK
            )
            rt.accept_cache[key] = [float(u) for u in raw]
        p = rt.req.latent_accept.get(method)
        if p is None:
            raise ConfigError(
                f"request {rt.req.id} has no latent acceptance for {method!r}"
            )
        return rt.accept_cache[key][pos % _DRAW_CHUNK] < p

    # -- commits ---------------------------------------------------------

    def commit(self, rt: _ReqRuntime, pos: int, token: int) -> None:
        prev = rt.sequence[pos]
        if prev is None:
            rt.sequence[pos] = token
        elif prev != token:  # all executors must agree with the target model
            raise AssertionError(
                f"request {rt.req.id}: conflicting commit at position {pos}"
            )
        if pos == rt.committed_high:
            high = pos + 1
            while high < rt.true_len and rt.sequence[high] is not None:
                high += 1
            rt.committed_high = high
            rt.req.position = min(high, rt.true_len)

    def finish(self, rt: _ReqRuntime, t: float, worker: str) -> None:
        if rt.finished:
            return
        rt.finished = True
        rt.finish_ms = t
        rt.winner = worker
        self.log(t, "finish", worker, rt.req.id)

    def log(self, t: float, kind: str, worker: str, request: int | None, **payload):
        rec = {"time_ms": round(t, 6), "kind": kind, "worker": worker}
        if request is not None:
            rec["request"] = request
        if payload:
            rec.update(payload)
        self.events.append(rec)

    # -- schedulers ------------------------------------------------------

    def on_drain(self, worker_id: str | None, t: float) -> None:
        """BoN scheduler trigger; ``None`` repacks existing spare capacity."""
        if not self.cfg.bon:
            return
        active = [rt.req for rt in self.reqs.values() if not rt.finished]
        if not active:
            return
        freed = []
        if worker_id is not None:
            self.bon_state.load.setdefault(worker_id, 0)
            freed = [worker_id]
        assignment = bon_mod.assign_bon(
            active=active,
            methods=list(self.cfg.bon_methods),
            freed=freed,
            state=self.bon_state,
            policy=self.cfg.bon_policy,
        )
        for (rid, method), target in sorted(assignment.pairs.items()):
            self._spawn_replica(rid, method, target, t)

    def _replica_window(self, method: str) -> int:
        if method not in self._replica_windows:
            windows = self.model.windows(self.worker_cfg)
            p = self._prior(method)
            w, _ = planner_mod._argmax_window(
                windows,
                lambda w: tgs_coupled(
                    self.model, method, 1, self.worker_cfg, w, 1, p
                ),
            )
            self._replica_windows[method] = w
        return self._replica_windows[method]

    def _spawn_replica(self, rid: int, method: str, worker: str, t: float) -> None:
        rt = self.reqs[rid]
        delay = 0.0
        if self.cfg.scale_cost is not None:
            delay = bon_mod.scale_charge(rt.req, self.cfg.scale_cost)
        ready = t + delay
        exec_id = f"{worker}:{method}"
        ex = self.executors.get(exec_id)
        if ex is None:
            ex = _Executor(
                sim=self, worker_id=exec_id, role="replica",
                kind=POLICY_COUPLED, method=method,
                config_id=self.worker_cfg, g_d=1,
                bon_worker=worker,
            )
            self.executors[exec_id] = ex
            self.new_executors.append(ex)
        ex.add_slot(
            rt, ready_ms=ready, position=rt.committed_high,
            window=self._replica_window(method),
        )
        self.bon_assign_count += 1
        self.log(
            t, "bon_assign", worker, rid,
            method=method, ready_ms=round(ready, 6),
        )
        if ex.round_plan is None:  # idle or brand new: wake it up
            self.schedule(ex, max(t, ready))

    def in_tail(self) -> bool:
        """Whether the run is down to its straggler tail.

        Per-request re-planning reasons at batch size 1, so it is deferred
        until most of the batch has drained.
        """
        live = sum(1 for rt in self.reqs.values() if not rt.finished)
        return live <= max(2, len(self.reqs) // 4)

    def run_reconfig(self, ex: "_Executor", t: float) -> None:
        live = [rt.req for rt in self.reqs.values() if not rt.finished]
        if not live:
            return
        plans = planner_mod.reconfigure(self.plan, live, self.model)
        self._rebalance_tail(ex, t)
        # per-request plans reason at batch size 1, and a serialized slot
        # stalls every other slot sharing its group, so a plan only applies
        # once its request has a worker to itself
        solo: dict[int, bool] = {}
        for other in self.executors.values():
            if other.role != "incumbent":
                continue
            alive = [s for s in other.slots if not s.rt.finished]
            alive += [s for s in other.joining if not s.rt.finished]
            for s in alive:
                solo[s.rt.req.id] = len(alive) == 1
        windows = planner_mod.admissible_windows(
            self.model, self.plan.method, self.plan.g_d, self.plan.g_v
        )
        for rp in plans:
            rt = self.reqs[rp.request_id]
            if not solo.get(rp.request_id, True):
                continue
            p_hat = rt.req.rate_estimate.estimate()
            # the ring ratio is censored by the window (a full accept stops
            # the count at w); invert it to a per-token rate before pricing
            p_tok = self._debias(p_hat, rt.req.window)
            window, mode = rp.window, rp.mode
            if self._solo_rate(mode, window, p_tok) < self._solo_rate(
                rt.req.mode, rt.req.window, p_tok
            ):
                # the closed forms credit the verifier bonus token, which
                # this event loop (bonus off) does not emit; fall back to
                # the re-planner's pipelined sibling and keep the current
                # configuration if even that loses under the loop's own
                # round accounting
                window, _ = planner_mod._argmax_window(
                    windows,
                    lambda w: tgs_decoupled(
                        self.model, self.plan.method, self.plan.g_d,
                        self.plan.g_v, w, 1, p_hat,
                    ),
                )
                mode = MODE_DECOUPLED
                if self._solo_rate(mode, window, p_tok) < self._solo_rate(
                    rt.req.mode, rt.req.window, p_tok
                ):
                    continue
            rt.req.window = window
            rt.req.mode = mode
            if mode == MODE_COUPLED:
                # abandon any in-flight speculation from the pipelined mode
                for other in self.executors.values():
                    for s in other.slots:
                        if s.rt is rt and s.pending is not None:
                            rt.wasted += s.pending[1]
                            s.pending = None
        self.reconfig_count += 1
        self.log(
            t, "reconfig", ex.worker_id, None,
            plans=[
                {"request": rp.request_id, "w": rp.window, "mode": rp.mode}
                for rp in plans
            ],
        )

    @staticmethod
    def _debias(ratio: float, w: int) -> float:
        """Per-token acceptance rate whose windowed accepted/proposed ratio
        equals ``ratio``: inverts r(p) = (p - p^(w+1)) / (w (1-p))."""
        if ratio <= 0.0:
            return 0.0
        if ratio >= 1.0:
            return 1.0
        lo, hi = 0.0, 1.0
        for _ in range(40):
            mid = (lo + hi) / 2.0
            r = (mid - mid ** (w + 1)) / (w * (1.0 - mid))
            if r < ratio:
                lo = mid
            else:
                hi = mid
        return (lo + hi) / 2.0

    def _solo_rate(self, mode: str, w: int, p: float) -> float:
        """Steady-state tokens/ms of a solo slot under the event loop's own
        round semantics (no verifier bonus; a partial accept in pipelined
        mode costs one draft-only gap round)."""
        d = w * self.model.draft_model(self.method, self.worker_gd).eval(1)
        if w in self.model.verify.get(self.worker_cfg, {}):
            vw = w
        else:  # nearest larger configured window is the graph that would run
            larger = [x for x in self.model.windows(self.worker_cfg) if x > w]
            vw = min(larger) if larger else max(self.model.windows(self.worker_cfg))
        v = self.model.verify_model(self.worker_cfg, vw).eval(1)
        committed = expected_tokens_coupled(p, w) - p**w
        if mode == MODE_COUPLED:
            return committed / (d + v)
        return committed / (max(d, v) + (1.0 - p**w) * d)

    def pull_straggler(self, target: "_Executor", t: float) -> bool:
        """A fully drained group adopts a straggler from the busiest group.

        The slot moves with its speculation state; it joins once the source
        group's in-flight round (which still references it) has ended, plus
        any configured scale charge.  Returns True when a migration
        happened, in which case the target worker is no longer free.
        """
        if not self.cfg.reconfig:
            return False
        if target.role != "incumbent" or target.kind != POLICY_DECOUPLED:
            return False
        moved = 0
        first_ready = 0.0
        while True:
            best: tuple[_Executor, list[_Slot]] | None = None
            for e in self.executors.values():
                if e is target or e.role != "incumbent" or e.kind != POLICY_DECOUPLED:
                    continue
                live = [s for s in e.slots if not s.rt.finished]
                if len(live) >= moved + 2 and (
                    best is None or len(live) > len(best[1])
                ):
                    best = (e, live)
            if best is None:
                break
            source, live = best
            s = min(
                live, key=lambda s: (s.rt.req.rate_estimate.estimate(), s.rt.req.id)
            )
            source.slots.remove(s)
            delay = 0.0
            if self.cfg.scale_cost is not None:
                delay = bon_mod.scale_charge(s.rt.req, self.cfg.scale_cost)
            ready = (source.round_end if source.round_plan is not None else t) + delay
            s.ready_ms = ready
            target.joining.append(s)
            target.drained_ms = None
            self.log(t, "migrate", source.worker_id, s.rt.req.id, to=target.worker_id)
            if moved == 0:
                first_ready = ready
            moved += 1
        if not moved:
            return False
        # the placement changed; re-plan the now less crowded requests
        self.run_reconfig(target, t)
        self.schedule(target, max(t, first_ready))
        return True

    def _rebalance_tail(self, ex: "_Executor", t: float) -> None:
        """Spread the triggering worker's live slots over drained workers.

        During the drain tail, whole groups sit idle while stragglers still
        share one group; moving a slot (with its speculation state) onto an
        idle group shrinks both workers' batches.  Only the triggering
        worker is touched: it is between rounds, so its slots are not
        referenced by any in-flight round plan.
        """
        if ex.role != "incumbent" or ex.kind != POLICY_DECOUPLED:
            return
        idle = [
            e
            for e in self.executors.values()
            if e is not ex
            and e.role == "incumbent"
            and e.kind == POLICY_DECOUPLED
            and e.round_plan is None
            and not any(not s.rt.finished for s in e.slots)
            and not e.joining
        ]
        live = [s for s in ex.slots if not s.rt.finished]
        while len(live) > 1 and idle:
            target = idle.pop(0)
            s = live.pop()
            ex.slots.remove(s)
            s.ready_ms = t
            target.joining.append(s)
            target.drained_ms = None
            self.log(t, "migrate", ex.worker_id, s.rt.req.id, to=target.worker_id)
            self.schedule(target, t)

    # -- event loop ------------------------------------------------------

    def schedule(self, ex: "_Executor", t: float) -> None:
        start = ex.begin_round(t)
        if start is None:
            ex.drained(t)
            return
        self._seq += 1
        heapq.heappush(self.heap, (ex.round_end, self._seq, ex.worker_id))

    def run(self) -> SimMetrics:
        self.heap: list[tuple[float, int, str]] = []
        self._seq = 0
        self.new_executors: list[_Executor] = []
        now = 0.0
        for ex in list(self.executors.values()):
            self.schedule(ex, 0.0)
        while self.heap:
            t, _, exec_id = heapq.heappop(self.heap)
            now = max(now, t)
            ex = self.executors.get(exec_id)
            if ex is None or ex.round_plan is None or ex.round_end != t:
                continue
            ex.end_round(t)
            self.schedule(ex, t)
            # replica executors spawned by drain events during end_round
            for new_ex in self.new_executors:
                if new_ex.round_plan is None:
                    self.schedule(new_ex, t)
            self.new_executors.clear()
        return self._metrics(now)

    def _metrics(self, last_t: float) -> SimMetrics:
        # the step ends when the last request finishes; a replica round that
        # outlives the finish would be cancelled on real hardware
        finish_times = [rt.finish_ms for rt in self.reqs.values()]
        makespan = (max(finish_times) if finish_times else last_t) + self.cfg.prepare_learn_ms
        requests = {}
        sequences = {}
        total_committed = 0
        total_wasted = 0
        for rid in self.order:
            rt = self.reqs[rid]
            if not rt.finished:
                raise AssertionError(f"request {rid} never finished")
            seq = [tok for tok in rt.sequence]
            if any(tok is None for tok in seq):
                raise AssertionError(f"request {rid} has uncommitted positions")
            sequences[rid] = seq  # type: ignore[assignment]
            total_committed += rt.true_len
            total_wasted += rt.wasted
            requests[rid] = RequestMetrics(
                id=rid,
                true_len=rt.true_len,
                finish_ms=rt.finish_ms,
                committed=rt.true_len,
                drafted=rt.drafted,
                wasted=rt.wasted,
                windows=rt.windows,
                partial_events=rt.partial_events,
                winner=rt.winner,
                tokens_per_window=(
                    rt.amortized_sum / rt.windows if rt.windows else 0.0
                ),
            )
        workers = {}
        for ex in self.executors.values():
            drained = ex.drained_ms if ex.drained_ms is not None else last_t
            workers[ex.worker_id] = WorkerMetrics(
                id=ex.worker_id,
                role=ex.role,
                busy_ms=ex.busy_ms,
                idle_ms=max(makespan - self.cfg.prepare_learn_ms - ex.busy_ms, 0.0),
                drained_ms=drained,
            )
        makespan_no_prep = makespan - self.cfg.prepare_learn_ms
        return SimMetrics(
            policy=self.cfg.policy,
            seed=self.seed,
            makespan_ms=makespan,
            total_committed=total_committed,
            total_wasted=total_wasted,
            mean_tgs=(
                total_committed / makespan_no_prep if makespan_no_prep > 0 else 0.0
            ),
            requests=requests,
            workers=workers,
            outcomes=self.outcomes,
            events=self.events,
            sequences=sequences,
            bon_assign_count=self.bon_assign_count,
            reconfig_count=self.reconfig_count,
        )


# ---------------------------------------------------------------------------


class _Slot:
    """One request's execution state on one executor.

    ``pending`` is the single window awaiting verification; the successor
    window (pipeline depth 2) only ever exists inside the round that drafts
    it, so it lives in the round plan rather than here.
    """

    __slots__ = ("rt", "pos", "pending", "ready_ms", "window")

    def __init__(self, rt: _ReqRuntime, pos: int, ready_ms: float, window: int | None):
        self.rt = rt
        self.pos = pos  # executor-local committed position
        self.pending: tuple[int, int] | None = None  # (start, n) awaiting verify
        self.ready_ms = ready_ms
        self.window = window  # fixed window for replicas; None follows req state

    def w(self) -> int:
        return self.window if self.window is not None else self.rt.req.window

    def mode(self) -> str:
        if self.window is not None:
            return MODE_COUPLED  # replicas run serialized
        return self.rt.req.mode


class _Executor:
    """A worker group advancing in rounds, or a BoN replica worker."""

    def __init__(
        self,
        sim: _Sim,
        worker_id: str,
        role: str,
        kind: str,
        method: str,
        config_id: str,
        g_d: int,
        bon_worker: str | None = None,
    ):
        self.sim = sim
        self.worker_id = worker_id
        self.role = role
        self.kind = kind
        self.method = method
        self.config_id = config_id
        self.g_d = g_d
        self.bon_worker = bon_worker
        self.slots: list[_Slot] = []
        self.joining: list[_Slot] = []
        self.busy_ms = 0.0
        self.drained_ms: float | None = None
        self.committed_since_reconfig = 0
        self.round_plan: dict | None = None
        self.round_end = 0.0

    def _verify_cost(self, n: int, b: int) -> float:
        """Verification round cost for an n-token window at batch size b.

        Truncated windows without their own verify entry are priced at the
        nearest larger configured window (its graph is what would run).
        """
        model = self.sim.model
        if n in model.verify.get(self.config_id, {}):
            return model.verify_model(self.config_id, n).eval(b)
        larger = [w for w in model.windows(self.config_id) if w > n]
        w = min(larger) if larger else max(model.windows(self.config_id))
        return model.verify_model(self.config_id, w).eval(b)

    def add_slot(
        self,
        rt: _ReqRuntime,
        ready_ms: float,
        position: int,
        window: int | None = None,
    ) -> None:
        self.joining.append(_Slot(rt, position, ready_ms, window))
        self.drained_ms = None

    # -- round lifecycle -------------------------------------------------

    def _reap(self, t: float) -> None:
        for s in self.slots:
            if not s.rt.finished:
                continue
            if s.pending is not None:
                # drafted but never verified because the request finished on
                # another executor; pure waste
                s.rt.wasted += s.pending[1]
                s.pending = None
            if self.role == "replica" and self.bon_worker:
                bon_mod.release_pair(
                    self.sim.bon_state, s.rt.req.id, self.method, self.bon_worker
                )
        self.slots = [s for s in self.slots if not s.rt.finished]
        still = []
        for s in self.joining:
            if s.rt.finished:
                if self.role == "replica" and self.bon_worker:
                    bon_mod.release_pair(
                        self.sim.bon_state, s.rt.req.id, self.method, self.bon_worker
                    )
                continue
            if s.ready_ms <= t:
                self.slots.append(s)
            else:
                still.append(s)
        self.joining = still

    def begin_round(self, t: float) -> float | None:
        """Plan the next round; returns its start time or None when empty."""
        self._reap(t)
        if not self.slots:
            if self.joining:
                t = min(s.ready_ms for s in self.joining)
                self._reap(t)
            if not self.slots:
                self.round_plan = None
                return None

        drafts: list[tuple[_Slot, int, int]] = []  # (slot, start, n)
        verifies: list[_Slot] = []
        if self.kind == POLICY_PLAIN:
            for s in self.slots:
                drafts.append((s, s.pos, 1))
            duration = self.sim.model.plain_model(self.config_id).eval(len(self.slots))
        elif self.kind in (POLICY_COUPLED, POLICY_DISAGGREGATED):
            # serialized: draft a window and verify it within the same round
            for s in self.slots:
                n = min(s.w(), s.rt.true_len - s.pos)
                drafts.append((s, s.pos, n))
            w_max = max(n for _, _, n in drafts)
            b = len(self.slots)
            d = self.sim.model.draft_model(self.method, self.g_d).eval(b)
            duration = w_max * d + self._verify_cost(w_max, b)
        else:  # decoupled: draft and verify overlap on disjoint resources
            serial: list[tuple[_Slot, int, int]] = []  # coupled-mode slots
            for s in self.slots:
                if s.mode() == MODE_COUPLED:
                    # serialized within the round: draft, then join the
                    # round's verify pass (which waits for this draft)
                    if s.pending is not None:
                        # speculation left over from the pipelined mode
                        s.rt.wasted += s.pending[1]
                        s.pending = None
                    n = min(s.w(), s.rt.true_len - s.pos)
                    serial.append((s, s.pos, n))
                elif s.pending is None:
                    n = min(s.w(), s.rt.true_len - s.pos)
                    if n > 0:
                        drafts.append((s, s.pos, n))
                else:
                    verifies.append(s)
                    start = s.pending[0] + s.pending[1]
                    n = min(s.w(), s.rt.true_len - start)
                    if n > 0:
                        drafts.append((s, start, n))
            n_drafting = len(drafts) + len(serial)
            d_model = self.sim.model.draft_model(self.method, self.g_d)
            d_time = 0.0
            if drafts:
                tokens = max(n for _, _, n in drafts)
                d_time = tokens * d_model.eval(n_drafting)
            serial_draft = 0.0
            if serial:
                serial_draft = max(n for _, _, n in serial) * d_model.eval(
                    n_drafting
                )
            verify_windows = [s.pending[1] for s in verifies]
            verify_windows += [n for _, _, n in serial]
            v_time = 0.0
            if verify_windows:
                v_time = self._verify_cost(
                    max(verify_windows), len(verify_windows)
                )
            duration = max(d_time, serial_draft + v_time)
            if duration <= 0.0:
                raise AssertionError("empty decoupled round")
            self.round_plan = {
                "drafts": drafts,
                "serial": serial,
                "verifies": verifies,
                "start": t,
            }
            self.round_end = t + duration
            self.busy_ms += duration
            if self.sim.cfg.log_draft_events and (drafts or serial):
                self.sim.log(
                    t, "draft", self.worker_id, None,
                    requests=[s.rt.req.id for s, _, _ in drafts + serial],
                    tokens=sum(n for _, _, n in drafts + serial),
                )
            return t

        self.round_plan = {"drafts": drafts, "verifies": verifies, "start": t}
        self.round_end = t + duration
        self.busy_ms += duration
        if self.sim.cfg.log_draft_events and drafts:
            self.sim.log(
                t, "draft", self.worker_id, None,
                requests=[s.rt.req.id for s, _, _ in drafts],
                tokens=sum(n for _, _, n in drafts),
            )
        return t

    def end_round(self, t: float) -> None:
        plan = self.round_plan
        self.round_plan = None
        assert plan is not None
        if self.kind == POLICY_PLAIN:
            self._end_plain(t, plan)
        elif self.kind in (POLICY_COUPLED, POLICY_DISAGGREGATED):
            self._end_serialized(t, plan)
        else:
            self._end_decoupled(t, plan)
        if (
            self.sim.cfg.reconfig
            and self.role == "incumbent"
            and self.kind == POLICY_DECOUPLED
            and self.committed_since_reconfig >= self.sim.cfg.reconfig_interval
            and self.sim.in_tail()
        ):
            self.sim.run_reconfig(self, t)
            self.committed_since_reconfig = 0
        if not any(not s.rt.finished for s in self.slots) and not self.joining:
            pass  # schedule() will notice and drain

    def drained(self, t: float) -> None:
        if self.drained_ms is None:
            self.drained_ms = t
            if self.role == "incumbent":
                if self.sim.pull_straggler(self, t):
                    return  # adopted a straggler; this worker is not free
                self.sim.on_drain(self.worker_id, t)
            else:
                # a drained replica worker frees verification capacity that
                # the packer may reuse for other tail requests
                self.sim.on_drain(None, t)

    # -- per-kind round completion --------------------------------------

    def _end_plain(self, t: float, plan: dict) -> None:
        for s, start, _ in plan["drafts"]:
            if s.rt.finished:
                continue
            token = self.sim.true_token(s.rt, start)
            self.sim.commit(s.rt, start, token)
            s.pos = start + 1
            self.committed_since_reconfig += 1
            if s.pos >= s.rt.true_len:
                self.sim.finish(s.rt, t, self.worker_id)

    def _verify_prefix(self, s: _Slot, start: int, n: int) -> int:
        a = 0
        while a < n and self.sim.accept_draw(s.rt, self.method, start + a):
            a += 1
        return a

    def _apply_outcome(
        self, s: _Slot, t: float, start: int, n: int, depth2_waste: int
    ) -> None:
        """Verify a window of n drafted tokens starting at ``start``."""
        rt = s.rt
        a = self._verify_prefix(s, start, n)
        full = a == n
        committed = 0
        if full:
            for i in range(n):
                self.sim.commit(rt, start + i, self.sim.true_token(rt, start + i))
            committed = n
            new_pos = start + n
            if self.sim.cfg.bonus_token and new_pos < rt.true_len:
                self.sim.commit(rt, new_pos, self.sim.true_token(rt, new_pos))
                committed += 1
                new_pos += 1
            wasted = 0
        else:
            for i in range(a):
                self.sim.commit(rt, start + i, self.sim.true_token(rt, start + i))
            # rejected token triggers the corrected one; remainder is waste
            corrected_pos = start + a
            self.sim.commit(rt, corrected_pos, self.sim.true_token(rt, corrected_pos))
            committed = a + 1
            new_pos = corrected_pos + 1
            wasted = max(n - a - 1, 0) + depth2_waste
            rt.partial_events += 1
        rt.windows += 1
        rt.wasted += wasted
        rt.amortized_sum += committed if full else committed / 2.0
        s.pos = new_pos
        self.committed_since_reconfig += committed
        rt.req.rate_estimate.record(n, a)
        mode = s.mode()
        self.sim.outcomes.append(
            VerificationOutcome(
                time_ms=t,
                worker=self.worker_id,
                request_id=rt.req.id,
                method=self.method,
                mode=mode if self.kind == POLICY_DECOUPLED else MODE_COUPLED,
                window=max(s.w(), n, depth2_waste),
                proposed=n,
                accepted=a,
                committed=committed,
                wasted=wasted,
                full_accept=full,
            )
        )
        self.sim.log(
            t, "verify", self.worker_id, rt.req.id,
            proposed=n, accepted=a, committed=committed, wasted=wasted,
        )
        if committed:
            self.sim.log(t, "commit", self.worker_id, rt.req.id, tokens=committed)
        if wasted:
            self.sim.log(t, "rollback", self.worker_id, rt.req.id, tokens=wasted)
        if s.pos >= rt.true_len:
            self.sim.finish(rt, t, self.worker_id)

    def _end_serialized(self, t: float, plan: dict) -> None:
        for s, start, n in plan["drafts"]:
            if s.rt.finished:
                continue
            s.rt.drafted += n
            self._apply_outcome(s, t, start, n, depth2_waste=0)

    def _end_decoupled(self, t: float, plan: dict) -> None:
        for s, start, n in plan["serial"]:
            if s.rt.finished:
                continue
            # serialized slots verify their window within this round
            s.rt.drafted += n
            self._apply_outcome(s, t, start, n, depth2_waste=0)
        drafted_now: dict[int, tuple[int, int]] = {}
        for s, start, n in plan["drafts"]:
            if s.rt.finished:
                continue
            s.rt.drafted += n
            drafted_now[id(s)] = (start, n)
        for s in plan["verifies"]:
            if s.rt.finished:
                # outcome of a request already finished elsewhere is dropped
                continue
            if s.pending is None:
                # a mid-round reconfiguration abandoned this window
                continue
            start, n = s.pending
            successor = drafted_now.pop(id(s), None)
            # the successor survives only when this window fully accepts
            if self._verify_prefix(s, start, n) == n:
                self._apply_outcome(s, t, start, n, depth2_waste=0)
                s.pending = successor
            else:
                waste2 = successor[1] if successor else 0
                self._apply_outcome(s, t, start, n, depth2_waste=waste2)
                s.pending = None
        # draft-only slots: their new window goes to verification next round
        for s, start, n in plan["drafts"]:
            if s.rt.finished:
                continue
            if id(s) in drafted_now and s.pending is None:
                if start == s.pos:
                    s.pending = (start, n)
                else:
                    # orphaned successor of a window that a mid-round
                    # reconfiguration abandoned
                    s.rt.wasted += n
                drafted_now.pop(id(s))


def simulate(config: SimConfig) -> SimMetrics:
    """Run one rollout step in virtual time and return its metrics."""
    return _Sim(config).run()
