"""Best-of-N drafting assignment for tail requests.

When rollout workers drain during the long tail, they are handed extra
drafting methods for the still-running requests.  Each freed worker joins
the least-staffed method, then each method's workers are packed with the
lowest-acceptance-rate requests first, up to a per-worker verification
batch cap.  A depth-first variant that gives the slowest request every
method before moving on is available behind ``policy="dfs"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .costmodel import AffineLatencyModel
from .errors import ConfigError
from .workload import Request


@dataclass
class ClusterState:
    """Mutable Best-of-N bookkeeping owned by the simulation loop."""

    b_max: int
    load: dict[str, int] = field(default_factory=dict)  # worker -> batch count
    method_workers: dict[str, list[str]] = field(default_factory=dict)
    # (request id, method) pairs currently being served anywhere, including
    # the incumbent drafting method.
    active_pairs: set[tuple[int, str]] = field(default_factory=set)

    def __post_init__(self):
        if self.b_max < 1:
            raise ConfigError(f"b_max must be >= 1, got {self.b_max}")

    def worker_load(self, worker: str) -> int:
        return self.load.get(worker, 0)


@dataclass(frozen=True)
class BonAssignment:
    """(request id, method) -> worker decisions of one scheduler invocation."""

    pairs: dict[tuple[int, str], str]

    def __bool__(self) -> bool:
        return bool(self.pairs)


@dataclass(frozen=True)
class ScaleCost:
    """Latency charged before a new replica's first draft.

    ``model_scale_ms`` covers runtime/graph/parameter deployment;
    ``kv_scale`` covers KV-cache recovery, affine in the committed position.
    """

    model_scale_ms: float
    kv_scale: AffineLatencyModel

    def __post_init__(self):
        if self.model_scale_ms < 0:
            raise ConfigError("model_scale_ms must be >= 0")


def scale_charge(request: Request, cost: ScaleCost) -> float:
    """Delay in ms before a replica of ``request`` can start drafting."""
    kv = 0.0
    if request.position > 0:
        kv = cost.kv_scale.eval(request.position)
    else:
        kv = cost.kv_scale.intercept
    return cost.model_scale_ms + kv


def _rate(r: Request) -> float:
    return r.rate_estimate.estimate()


def assign_bon(
    active: list[Request],
    methods: list[str],
    freed: list[str],
    state: ClusterState,
    policy: str = "greedy",
) -> BonAssignment:
    """Assign freed workers to drafting methods and requests to their slots.

    Mutates ``state`` (worker membership, loads, active pairs) to reflect
    the returned assignment.  A request is never given the same method
    twice concurrently.
    """
    if not methods:
        raise ConfigError("assign_bon needs at least one candidate method")
    if policy not in ("greedy", "dfs"):
        raise ConfigError(f"unknown BoN policy {policy!r}")
    for m in methods:
        state.method_workers.setdefault(m, [])

    # Each freed worker joins the method with the fewest workers; ties
    # follow the method list order.
    for worker in freed:
        target = min(methods, key=lambda m: len(state.method_workers[m]))
        state.method_workers[target].append(worker)
        state.load.setdefault(worker, 0)

    pairs: dict[tuple[int, str], str] = {}
    ordered = sorted(active, key=lambda r: (_rate(r), r.id))

    if policy == "greedy":
        for method in methods:
            queue = list(ordered)  # re-sorted afresh per method
            for worker in state.method_workers[method]:
                while state.worker_load(worker) < state.b_max and queue:
                    r = queue.pop(0)
                    if (r.id, method) in state.active_pairs:
                        continue
                    pairs[(r.id, method)] = worker
                    state.active_pairs.add((r.id, method))
                    state.load[worker] = state.worker_load(worker) + 1
    else:  # dfs: give the slowest request every method before moving on
        for r in ordered:
            for method in methods:
                if (r.id, method) in state.active_pairs:
                    continue
                worker = next(
                    (
                        w
                        for w in state.method_workers[method]
                        if state.worker_load(w) < state.b_max
                    ),
                    None,
                )
                if worker is None:
                    continue
                pairs[(r.id, method)] = worker
                state.active_pairs.add((r.id, method))
                state.load[worker] = state.worker_load(worker) + 1

    return BonAssignment(pairs=pairs)


def release_pair(state: ClusterState, request_id: int, method: str, worker: str) -> None:
    """Undo one assignment when a replica finishes or is cancelled."""
    state.active_pairs.discard((request_id, method))
    if state.worker_load(worker) > 0:
        state.load[worker] = state.worker_load(worker) - 1
