"""Latency models and closed-form speculation performance math.

Draft and verification step latencies are affine in the batch size, with
coefficients fitted from offline profiling samples.  On top of those sit the
closed forms used by the planners:

* ``accept_pmf``           -- probability of accepting ``a`` of ``w`` drafted
  tokens under per-token acceptance probability ``p``.
* ``expected_tokens_decoupled`` -- expected committed tokens per drafting
  window under pipelined (decoupled) execution; partial accepts are amortized
  over the window and its discarded successor.
* ``expected_tokens_coupled``   -- expected committed tokens per iteration
  under serialized draft-then-verify execution, including the verifier's
  corrected token.
* ``iteration_latency`` / ``tgs_*`` -- window latency and token generation
  speed for both execution styles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InsufficientDataError, MissingEntryError


@dataclass(frozen=True)
class AffineLatencyModel:
    """latency(b) = slope * b + intercept, in milliseconds.

    ``clamped`` marks models whose fitted slope or intercept was negative
    and got clamped to zero.
    """

    slope: float
    intercept: float
    clamped: bool = False

    def __post_init__(self):
        if self.slope < 0 or self.intercept < 0:
            raise ConfigError(
                f"affine model parameters must be >= 0, "
                f"got slope={self.slope} intercept={self.intercept}"
            )

    def eval(self, b: int) -> float:
        if b < 1:
            raise ValueError(f"batch size must be >= 1, got {b}")
        return self.slope * b + self.intercept


@dataclass(frozen=True)
class VerifyConfig:
    """One admissible verification deployment: GPU count + parallelism label."""

    id: str
    gpus: int
    parallelism: str = "tp"

    def __post_init__(self):
        if self.gpus < 1:
            raise ConfigError(f"config {self.id!r}: gpus must be >= 1")


@dataclass(frozen=True)
class ProfileSample:
    """One offline profiling observation: latency of a step at batch size b."""

    b: int
    latency_ms: float
    key: str = ""

    def __post_init__(self):
        if self.b < 1:
            raise ConfigError(f"profile sample batch size must be >= 1, got {self.b}")
        if self.latency_ms <= 0:
            raise ConfigError(
                f"profile sample latency must be > 0, got {self.latency_ms}"
            )


def fit_affine(samples: list[ProfileSample]) -> AffineLatencyModel:
    """Ordinary least squares fit of latency against batch size.

    Negative fitted coefficients are clamped to zero and flagged.
    """
    if len(samples) < 2 or len({s.b for s in samples}) < 2:
        raise InsufficientDataError(
            "affine fit needs >= 2 samples with >= 2 distinct batch sizes"
        )
    bs = np.array([s.b for s in samples], dtype=float)
    ys = np.array([s.latency_ms for s in samples], dtype=float)
    design = np.column_stack([bs, np.ones_like(bs)])
    (slope, intercept), *_ = np.linalg.lstsq(design, ys, rcond=None)
    clamped = slope < 0 or intercept < 0
    return AffineLatencyModel(
        slope=max(float(slope), 0.0),
        intercept=max(float(intercept), 0.0),
        clamped=bool(clamped),
    )


@dataclass
class CostModel:
    """Fitted latency models for an entire cluster.

    ``draft[method][g_d]`` is the per-token draft step latency with ``g_d``
    drafter GPUs; ``verify[config][w]`` the verification latency of a
    ``w``-token window under a verification configuration; ``plain[config]``
    a single autoregressive decode step of the target model.
    """

    draft: dict[str, dict[int, AffineLatencyModel]]
    verify: dict[str, dict[int, AffineLatencyModel]]
    plain: dict[str, AffineLatencyModel]
    total_gpus: int
    configs: list[VerifyConfig] = field(default_factory=list)

    def __post_init__(self):
        if self.total_gpus < 1:
            raise ConfigError(f"total_gpus must be >= 1, got {self.total_gpus}")
        for cfg in self.configs:
            if cfg.gpus > self.total_gpus:
                raise ConfigError(
                    f"config {cfg.id!r} needs {cfg.gpus} GPUs but the cluster "
                    f"has {self.total_gpus}"
                )

    # -- lookups ---------------------------------------------------------

    def config(self, config_id: str) -> VerifyConfig:
        for cfg in self.configs:
            if cfg.id == config_id:
                return cfg
        raise MissingEntryError(f"unknown verification config {config_id!r}")

    def draft_model(self, method: str, g_d: int) -> AffineLatencyModel:
        try:
            return self.draft[method][g_d]
        except KeyError:
            raise MissingEntryError(f"no draft model for ({method!r}, g_d={g_d})")

    def verify_model(self, config_id: str, w: int) -> AffineLatencyModel:
        try:
            return self.verify[config_id][w]
        except KeyError:
            raise MissingEntryError(
                f"no verify model for (config={config_id!r}, w={w})"
            )

    def plain_model(self, config_id: str) -> AffineLatencyModel:
        try:
            return self.plain[config_id]
        except KeyError:
            raise MissingEntryError(f"no plain-decode model for {config_id!r}")

    def methods(self) -> list[str]:
        return sorted(self.draft)

    def windows(self, config_id: str) -> list[int]:
        """Window sizes with verify entries for a config, ascending."""
        if config_id not in self.verify:
            raise MissingEntryError(f"no verify models for config {config_id!r}")
        return sorted(self.verify[config_id])

    def max_drafter_gpus(self, method: str) -> int:
        if method not in self.draft:
            raise MissingEntryError(f"no draft models for method {method!r}")
        return max(self.draft[method])

    # -- serialization ---------------------------------------------------

    def to_json(self) -> dict:
        def dump(m: AffineLatencyModel) -> dict:
            out = {"slope": m.slope, "intercept": m.intercept}
            if m.clamped:
                out["clamped"] = True
            return out

        return {
            "total_gpus": self.total_gpus,
            "configs": [
                {"id": c.id, "gpus": c.gpus, "parallelism": c.parallelism}
                for c in self.configs
            ],
            "draft": {
                m: {str(g): dump(mod) for g, mod in by_g.items()}
                for m, by_g in self.draft.items()
            },
            "verify": {
                c: {str(w): dump(mod) for w, mod in by_w.items()}
                for c, by_w in self.verify.items()
            },
            "plain": {c: dump(mod) for c, mod in self.plain.items()},
        }

    @classmethod
    def from_json(cls, data: dict) -> "CostModel":
        def load(d: dict) -> AffineLatencyModel:
            return AffineLatencyModel(
                slope=float(d["slope"]),
                intercept=float(d["intercept"]),
                clamped=bool(d.get("clamped", False)),
            )

        try:
            return cls(
                draft={
                    m: {int(g): load(mod) for g, mod in by_g.items()}
                    for m, by_g in data["draft"].items()
                },
                verify={
                    c: {int(w): load(mod) for w, mod in by_w.items()}
                    for c, by_w in data["verify"].items()
                },
                plain={c: load(mod) for c, mod in data.get("plain", {}).items()},
                total_gpus=int(data["total_gpus"]),
                configs=[
                    VerifyConfig(
                        id=str(c["id"]),
                        gpus=int(c["gpus"]),
                        parallelism=str(c.get("parallelism", "tp")),
                    )
                    for c in data.get("configs", [])
                ],
            )
        except KeyError as exc:
            raise ConfigError(f"cost-model file missing field: {exc}")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "CostModel":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(json.load(f))


# -- closed-form speculation math ---------------------------------------


def _check_pw(p: float, w: int) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"acceptance probability must be in [0,1], got {p}")
    if w < 1:
        raise ValueError(f"window must be >= 1, got {w}")


def accept_pmf(p: float, w: int, a: int) -> float:
    """Probability of accepting exactly ``a`` of ``w`` drafted tokens."""
    _check_pw(p, w)
    if a < 0 or a > w:
        raise ValueError(f"accepted count {a} outside [0, {w}]")
    if a == w:
        return p**w
    return (p**a) * (1.0 - p)


def expected_tokens_decoupled(p: float, w: int) -> float:
    """Expected committed tokens per drafting window, pipelined execution.

    A partial accept at offset ``a`` commits ``a + 1`` tokens but stalls the
    pipeline for one extra window, hence the (a+1)/2 amortization; a full
    accept commits the whole window with no stall.
    """
    _check_pw(p, w)
    partial = sum(accept_pmf(p, w, a) * (a + 1) / 2.0 for a in range(w))
    return partial + w * (p**w)


def expected_tokens_coupled(p: float, w: int) -> float:
    """Expected committed tokens per serialized draft-then-verify iteration.

    Accepted prefix plus the verifier's corrected (or bonus) token:
    (1 - p^(w+1)) / (1 - p), with limit w + 1 at p = 1.
    """
    _check_pw(p, w)
    if p == 1.0:
        return float(w + 1)
    return (1.0 - p ** (w + 1)) / (1.0 - p)


def iteration_latency(
    model: CostModel,
    method: str,
    g_d: int,
    config_id: str,
    w: int,
    b: int,
) -> float:
    """Pipelined window latency: max of draft and verify sides."""
    draft = model.draft_model(method, g_d)
    verify = model.verify_model(config_id, w)
    return max(w * draft.eval(b), verify.eval(b))


def iteration_latency_coupled(
    model: CostModel,
    method: str,
    g_d: int,
    config_id: str,
    w: int,
    b: int,
) -> float:
    """Serialized iteration latency: draft w tokens, then verify."""
    draft = model.draft_model(method, g_d)
    verify = model.verify_model(config_id, w)
    return w * draft.eval(b) + verify.eval(b)


def tgs_decoupled(
    model: CostModel,
    method: str,
    g_d: int,
    config_id: str,
    w: int,
    b: int,
    p: float,
) -> float:
    """Token generation speed (tokens/ms) under pipelined execution."""
    return expected_tokens_decoupled(p, w) / iteration_latency(
        model, method, g_d, config_id, w, b
    )


def tgs_coupled(
    model: CostModel,
    method: str,
    g_d: int,
    config_id: str,
    w: int,
    b: int,
    p: float,
) -> float:
    """Token generation speed (tokens/ms) under serialized execution."""
    return expected_tokens_coupled(p, w) / iteration_latency_coupled(
        model, method, g_d, config_id, w, b
    )
