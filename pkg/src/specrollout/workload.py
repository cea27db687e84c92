"""Rollout workload synthesis and the online acceptance-rate estimator.

A trace is a batch of requests with heavy-tailed latent response lengths and
per-(request, draft-method) latent token acceptance probabilities.  Response
lengths are lognormal, censored at a configurable cap; acceptance
probabilities are Beta-distributed per method.  Both are latent: the
simulator reveals them token by token, and schedulers may only look at the
sliding-window estimate kept in :class:`AcceptanceEstimator`.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace

from .errors import ConfigError, TraceFormatError
from .streams import stream

MODE_COUPLED = "C"
MODE_DECOUPLED = "D"


class AcceptanceEstimator:
    """Sliding-window ratio estimator over the last K verification outcomes.

    Returns ``prior`` until at least one outcome has been recorded; after
    that, the ratio of accepted to proposed tokens over the ring.
    """

    __slots__ = ("window", "prior", "_ring")

    def __init__(self, window: int = 64, prior: float = 0.5):
        if window < 1:
            raise ConfigError(f"estimator window must be >= 1, got {window}")
        if not 0.0 <= prior <= 1.0:
            raise ConfigError(f"estimator prior must be in [0,1], got {prior}")
        self.window = window
        self.prior = prior
        self._ring: deque[tuple[int, int]] = deque(maxlen=window)

    def record(self, proposed: int, accepted: int) -> "AcceptanceEstimator":
        if proposed < 0 or accepted < 0 or accepted > proposed:
            raise ValueError(
                f"invalid outcome: proposed={proposed} accepted={accepted}"
            )
        self._ring.append((proposed, accepted))
        return self

    def estimate(self) -> float:
        if not self._ring:
            return self.prior
        proposed = sum(p for p, _ in self._ring)
        if proposed == 0:
            return self.prior
        return sum(a for _, a in self._ring) / proposed

    def count(self) -> int:
        return len(self._ring)

    def clone(self) -> "AcceptanceEstimator":
        out = AcceptanceEstimator(self.window, self.prior)
        out._ring.extend(self._ring)
        return out

    def __repr__(self) -> str:
        return (
            f"AcceptanceEstimator(window={self.window}, prior={self.prior}, "
            f"n={len(self._ring)}, estimate={self.estimate():.3f})"
        )


@dataclass
class Request:
    """One rollout prompt with latent truth and live speculation state.

    ``true_len`` and ``latent_accept`` are ground truth only the simulator
    may read.  ``position``, ``mode``, ``window`` and ``rate_estimate`` are
    the live scheduling state.
    """

    id: int
    prompt_len: int
    true_len: int
    latent_accept: dict[str, float]
    position: int = 0
    mode: str = MODE_DECOUPLED
    window: int = 1
    rate_estimate: AcceptanceEstimator = field(
        default_factory=AcceptanceEstimator, repr=False, compare=False
    )

    def __post_init__(self):
        if self.true_len < 1:
            raise TraceFormatError(
                f"request {self.id}: true_len must be >= 1, got {self.true_len}"
            )
        if self.prompt_len < 0:
            raise TraceFormatError(
                f"request {self.id}: prompt_len must be >= 0, got {self.prompt_len}"
            )
        for method, p in self.latent_accept.items():
            if not 0.0 <= p <= 1.0:
                raise TraceFormatError(
                    f"request {self.id}: acceptance for {method!r} out of [0,1]: {p}"
                )
        if self.window < 1:
            raise TraceFormatError(
                f"request {self.id}: window must be >= 1, got {self.window}"
            )
        if not 0 <= self.position <= self.true_len:
            raise TraceFormatError(
                f"request {self.id}: position {self.position} out of range"
            )
        if self.mode not in (MODE_COUPLED, MODE_DECOUPLED):
            raise TraceFormatError(f"request {self.id}: bad mode {self.mode!r}")

    def fresh_copy(self, estimator_window: int = 64, prior: float = 0.5) -> "Request":
        """Copy with reset runtime state; simulations own their trace copy."""
        return replace(
            self,
            position=0,
            mode=MODE_DECOUPLED,
            window=1,
            rate_estimate=AcceptanceEstimator(estimator_window, prior),
        )


@dataclass(frozen=True)
class TraceSpec:
    """Parameters for synthesizing a trace.

    Response lengths: lognormal(mu, sigma) rounded to integers, clamped to
    [1, cap].  Acceptance: independent Beta(a, b) per drafting method.
    """

    batch_size: int
    length_mu: float = 5.0
    length_sigma: float = 0.9
    length_cap: int = 2000
    prompt_len_min: int = 128
    prompt_len_max: int = 1024
    accept_beta: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {"draft": (8.0, 2.0)}
    )
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 0:
            raise ConfigError(f"batch_size must be >= 0, got {self.batch_size}")
        if self.length_sigma <= 0:
            raise ConfigError(f"length_sigma must be > 0, got {self.length_sigma}")
        if self.length_cap < 1:
            raise ConfigError(f"length_cap must be >= 1, got {self.length_cap}")
        if not 0 <= self.prompt_len_min <= self.prompt_len_max:
            raise ConfigError(
                f"bad prompt length range "
                f"[{self.prompt_len_min}, {self.prompt_len_max}]"
            )
        if not self.accept_beta:
            raise ConfigError("accept_beta must name at least one drafting method")
        for method, (a, b) in self.accept_beta.items():
            if a <= 0 or b <= 0:
                raise ConfigError(
                    f"accept_beta[{method!r}]: Beta parameters must be > 0, "
                    f"got ({a}, {b})"
                )


def gen_trace(spec: TraceSpec) -> list[Request]:
    """Synthesize a batch of requests, deterministic in ``spec.seed``."""
    spec.validate()
    requests = []
    for rid in range(spec.batch_size):
        raw = stream(spec.seed, rid, "true_len").lognormal(
            spec.length_mu, spec.length_sigma
        )
        true_len = int(min(max(round(raw), 1), spec.length_cap))
        prompt_len = int(
            stream(spec.seed, rid, "prompt_len").integers(
                spec.prompt_len_min, spec.prompt_len_max + 1
            )
        )
        accept = {
            method: float(stream(spec.seed, rid, "accept", method).beta(a, b))
            for method, (a, b) in spec.accept_beta.items()
        }
        requests.append(
            Request(
                id=rid,
                prompt_len=prompt_len,
                true_len=true_len,
                latent_accept=accept,
            )
        )
    return requests


# Trace files are JSON lines; these field names are part of the contract.
_TRACE_FIELDS = ("id", "prompt_len", "true_len", "accept")


def save_trace(requests: list[Request], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in requests:
            record = {
                "id": r.id,
                "prompt_len": r.prompt_len,
                "true_len": r.true_len,
                "accept": r.latent_accept,
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def load_trace(path) -> list[Request]:
    """Load a JSON-lines trace; round-trips with :func:`save_trace`."""
    requests: list[Request] = []
    seen: set[int] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"invalid JSON: {exc.msg}", line=lineno)
            missing = [k for k in _TRACE_FIELDS if k not in record]
            if missing:
                raise TraceFormatError(
                    f"missing fields: {', '.join(missing)}", line=lineno
                )
            try:
                request = Request(
                    id=int(record["id"]),
                    prompt_len=int(record["prompt_len"]),
                    true_len=int(record["true_len"]),
                    latent_accept={
                        str(m): float(p) for m, p in record["accept"].items()
                    },
                )
            except (TypeError, ValueError, AttributeError) as exc:
                raise TraceFormatError(f"bad record: {exc}", line=lineno)
            except TraceFormatError as exc:
                raise TraceFormatError(str(exc), line=lineno)
            if request.id in seen:
                raise TraceFormatError(
                    f"duplicate request id {request.id}", line=lineno
                )
            seen.add(request.id)
            requests.append(request)
    return requests
