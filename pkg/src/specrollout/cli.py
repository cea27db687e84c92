"""Command-line entry point.

Wires the library into reproducible experiment shapes: cost-model fitting
(``fit``), drafting-method ladders (``ladder``), plan search (``plan``),
single simulations (``simulate``), batch-size sweeps (``sweep``), policy
ablations (``compare``) and per-worker timelines (``timeline``).

Every subcommand is deterministic given (config, seed): floats are written
with fixed formatting and JSON keys are sorted, so two runs with the same
inputs produce byte-identical output files.  Exit codes: 0 success, 2 for
configuration problems (bad flags, malformed files, missing model entries),
3 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .bon import ScaleCost
from .costmodel import CostModel, ProfileSample, fit_affine
from .errors import (
    ConfigError,
    InsufficientDataError,
    MissingEntryError,
    SpecRolloutError,
    TraceFormatError,
)
from .planner import (
    admissible_windows,
    build_ladder,
    group_batch,
    search_plan,
    search_plan_coupled,
)
from .costmodel import tgs_coupled, tgs_decoupled
from . import scenarios
from .sim import (
    POLICIES,
    POLICY_COUPLED,
    POLICY_DECOUPLED,
    POLICY_DISAGGREGATED,
    POLICY_PLAIN,
    SimConfig,
    SimMetrics,
    simulate,
)
from .workload import TraceSpec, gen_trace, load_trace

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_CONFIG_ERRORS = (
    ConfigError,
    TraceFormatError,
    MissingEntryError,
    InsufficientDataError,
)

# the ablation rows of `compare`, in expected fastest-last order; each row
# pins its whole policy stack regardless of the experiment config flags
COMPARE_STACKS: tuple[tuple[str, dict], ...] = (
    ("plain", {"policy": POLICY_PLAIN, "reconfig": False, "bon": False}),
    (
        "disaggregated",
        {"policy": POLICY_DISAGGREGATED, "reconfig": False, "bon": False},
    ),
    ("coupled", {"policy": POLICY_COUPLED, "reconfig": False, "bon": False}),
    ("decoupled", {"policy": POLICY_DECOUPLED, "reconfig": False, "bon": False}),
    (
        "decoupled+reconfig",
        {"policy": POLICY_DECOUPLED, "reconfig": True, "bon": False},
    ),
    (
        "decoupled+reconfig+bon",
        {"policy": POLICY_DECOUPLED, "reconfig": True, "bon": True},
    ),
)

DEFAULT_SWEEP_BATCHES = (1, 2, 4, 8, 16, 32, 64, 128, 256)


@dataclass
class ExperimentConfig:
    """One experiment scenario, loadable from a JSON file.

    All fields default to the shipped calibrated scenario; a config file
    only needs the fields it overrides.  ``trace_path`` replaces synthetic
    trace generation; ``model_path`` replaces the shipped cost model.
    """

    batch: int = 48
    policy: str = POLICY_DECOUPLED
    method: str = scenarios.DEFAULT_METHOD
    trace_path: str | None = None
    model_path: str | None = None
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    reconfig: bool = False
    bon: bool = False
    bon_methods: tuple[str, ...] = scenarios.BON_METHODS
    bon_policy: str = "greedy"
    b_max: int = 8
    bonus_token: bool = False
    reconfig_interval: int = 1000
    prepare_learn_ms: float = 0.0
    length_sigma: float | None = None  # None keeps the scenario default
    # the sweep isolates the batch-size effect: near-uniform lengths so the
    # drain tail does not dominate the small-batch rows
    sweep_batches: tuple[int, ...] = DEFAULT_SWEEP_BATCHES
    sweep_sigma: float = 0.2

    _FIELDS = {
        "batch", "policy", "method", "trace_path", "model_path", "seeds",
        "reconfig", "bon", "bon_methods", "bon_policy", "b_max",
        "bonus_token", "reconfig_interval", "prepare_learn_ms",
        "length_sigma", "sweep_batches", "sweep_sigma",
    }

    @classmethod
    def load(cls, path: str | None) -> "ExperimentConfig":
        if path is None:
            return cls()
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON: {exc.msg}")
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path}: expected a JSON object")
        unknown = sorted(set(data) - cls._FIELDS)
        if unknown:
            raise ConfigError(
                f"config file {path}: unknown fields: {', '.join(unknown)}"
            )
        cfg = cls()
        for key, value in data.items():
            if key in ("seeds", "bon_methods", "sweep_batches"):
                value = tuple(value)
            setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if any(b < 1 for b in self.sweep_batches):
            raise ConfigError("sweep batch sizes must be >= 1")


# -- deterministic output helpers ----------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_events(path: Path, events: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in events:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- shared scenario assembly --------------------------------------------


def _load_model(cfg: ExperimentConfig) -> CostModel:
    if cfg.model_path is not None:
        return CostModel.load(cfg.model_path)
    return scenarios.default_cost_model()


def _build_trace(cfg: ExperimentConfig, seed: int, batch: int | None = None):
    if cfg.trace_path is not None:
        return load_trace(cfg.trace_path)
    spec = scenarios.default_trace_spec(batch=batch or cfg.batch, seed=seed)
    if cfg.length_sigma is not None:
        spec = TraceSpec(**{**spec.__dict__, "length_sigma": cfg.length_sigma})
    return gen_trace(spec)


def _sim_config(
    cfg: ExperimentConfig,
    model: CostModel,
    trace,
    seed: int,
    overrides: dict | None = None,
) -> SimConfig:
    opts = {
        "policy": cfg.policy,
        "reconfig": cfg.reconfig,
        "bon": cfg.bon,
    }
    if overrides:
        opts.update(overrides)
    return SimConfig(
        trace=trace,
        model=model,
        policy=opts["policy"],
        method=cfg.method,
        reconfig=opts["reconfig"],
        bon=opts["bon"],
        bon_methods=cfg.bon_methods if opts["bon"] else (),
        bon_policy=cfg.bon_policy,
        b_max=cfg.b_max,
        scale_cost=scenarios.default_scale_cost(),
        bonus_token=cfg.bonus_token,
        seed=seed,
        prepare_learn_ms=cfg.prepare_learn_ms,
        reconfig_interval=cfg.reconfig_interval,
        estimator_priors=scenarios.estimator_priors(),
    )


def _summary_dict(m: SimMetrics) -> dict:
    return {
        "policy": m.policy,
        "seed": m.seed,
        "makespan_ms": round(m.makespan_ms, 6),
        "total_committed": m.total_committed,
        "total_wasted": m.total_wasted,
        "mean_tgs": round(m.mean_tgs, 6),
        "bon_assign_count": m.bon_assign_count,
        "reconfig_count": m.reconfig_count,
    }


def _request_rows(m: SimMetrics) -> list[list]:
    return [
        [
            r.id, r.true_len, r.finish_ms, r.committed, r.drafted, r.wasted,
            r.windows, r.partial_events, r.winner, r.tokens_per_window,
        ]
        for r in m.requests.values()
    ]


_REQUEST_HEADER = [
    "request", "true_len", "finish_ms", "committed", "drafted", "wasted",
    "windows", "partial_events", "winner", "tokens_per_window",
]


def _worker_rows(m: SimMetrics) -> list[list]:
    return [
        [w.id, w.role, w.busy_ms, w.idle_ms, w.drained_ms]
        for w in sorted(m.workers.values(), key=lambda w: w.id)
    ]


_WORKER_HEADER = ["worker", "role", "busy_ms", "idle_ms", "drained_ms"]


# -- fit -----------------------------------------------------------------


def _read_samples(path: str) -> dict[str, list[ProfileSample]]:
    groups: dict[str, list[ProfileSample]] = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        fields = reader.fieldnames or []
        for col in ("b", "latency_ms", "key"):
            if col not in fields:
                raise ConfigError(f"samples file {path}: missing column {col!r}")
        for lineno, row in enumerate(reader, start=2):
            try:
                sample = ProfileSample(
                    b=int(row["b"]),
                    latency_ms=float(row["latency_ms"]),
                    key=row["key"],
                )
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"samples file {path} line {lineno}: {exc}")
            groups.setdefault(sample.key, []).append(sample)
    if not groups:
        raise ConfigError(f"samples file {path}: no samples")
    return groups


def _config_gpus(config_id: str, overrides: dict[str, int]) -> int:
    if config_id in overrides:
        return overrides[config_id]
    digits = "".join(c for c in config_id if c.isdigit())
    return int(digits) if digits else 1


def cmd_fit(args, out: Path) -> int:
    groups = _read_samples(args.samples)
    overrides = {}
    for spec in args.config_gpus or []:
        name, _, count = spec.partition("=")
        if not count:
            raise ConfigError(f"--config-gpus wants NAME=COUNT, got {spec!r}")
        overrides[name] = int(count)

    draft: dict[str, dict[int, object]] = {}
    verify: dict[str, dict[int, object]] = {}
    plain: dict[str, object] = {}
    bad_keys = []
    print("key,residual_rms_ms")
    for key in sorted(groups):
        try:
            model = fit_affine(groups[key])
        except InsufficientDataError as exc:
            bad_keys.append(key)
            print(f"{key},rank-deficient ({exc})")
            continue
        rms = (
            sum((model.eval(s.b) - s.latency_ms) ** 2 for s in groups[key])
            / len(groups[key])
        ) ** 0.5
        print(f"{key},{rms:.6f}")
        parts = key.split("/")
        if len(parts) == 3 and parts[0] == "draft":
            draft.setdefault(parts[1], {})[int(parts[2])] = model
        elif len(parts) == 3 and parts[0] == "verify":
            verify.setdefault(parts[1], {})[int(parts[2])] = model
        elif len(parts) == 2 and parts[0] == "plain":
            plain[parts[1]] = model
        else:
            raise ConfigError(
                f"sample key {key!r} is not draft/<method>/<g_d>, "
                f"verify/<config>/<w> or plain/<config>"
            )
    if bad_keys:
        raise InsufficientDataError(
            f"rank-deficient sample groups: {', '.join(bad_keys)}"
        )
    from .costmodel import VerifyConfig

    model_file = CostModel(
        draft=draft,
        verify=verify,
        plain=plain,
        total_gpus=args.total_gpus,
        configs=[
            VerifyConfig(id=c, gpus=_config_gpus(c, overrides))
            for c in sorted(verify)
        ],
    )
    path = out / "model.json"
    model_file.save(path)
    print(f"wrote {path}")
    return EXIT_OK


# -- ladder / plan -------------------------------------------------------


def cmd_ladder(args, out: Path, cfg: ExperimentConfig) -> int:
    model = _load_model(cfg)
    methods = args.methods.split(",") if args.methods else model.methods()
    grid = (
        [float(x) for x in args.grid.split(",")]
        if args.grid
        else [round(0.05 * i, 2) for i in range(1, 20)]
    )
    ladder = build_ladder(methods, grid, model)
    rows = [
        [m, rate, ladder.speedup[m][i]]
        for m in ladder.methods
        for i, rate in enumerate(ladder.grid)
    ]
    path = out / "ladder.csv"
    _write_csv(path, ["method", "rate", "speedup"], rows)
    for m in ladder.methods:
        peak = max(ladder.speedup[m])
        print(f"{m}: peak speedup {peak:.3f} over plain decode")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_plan(args, out: Path, cfg: ExperimentConfig) -> int:
    model = _load_model(cfg)
    method = args.method or cfg.method
    rows = []
    for vc in model.configs:
        b_c = group_batch(vc.gpus, args.batch, model.total_gpus)
        g_c = min(vc.gpus, model.max_drafter_gpus(method))
        for w in model.windows(vc.id):
            rows.append([
                "coupled", vc.id, g_c, w, b_c,
                tgs_coupled(model, method, g_c, vc.id, w, b_c, args.rate),
            ])
        for g_d in range(1, min(vc.gpus, model.max_drafter_gpus(method)) + 1):
            group = g_d + vc.gpus
            if group > model.total_gpus:
                continue
            b_d = group_batch(group, args.batch, model.total_gpus)
            for w in admissible_windows(model, method, g_d, vc.id):
                rows.append([
                    "decoupled", vc.id, g_d, w, b_d,
                    tgs_decoupled(model, method, g_d, vc.id, w, b_d, args.rate),
                ])
    path = out / "plan_table.csv"
    _write_csv(
        path,
        ["mode", "config", "g_d", "window", "batch_per_group", "tgs"],
        rows,
    )
    plan = search_plan(args.batch, model, args.rate, method)
    coupled = search_plan_coupled(args.batch, model, args.rate, method)
    _write_json(
        out / "plan.json",
        {
            "decoupled": {
                "method": plan.method,
                "g_d": plan.g_d,
                "g_v": plan.g_v,
                "window": plan.window,
                "batch_per_group": plan.batch_per_group,
                "group_gpus": plan.group_gpus,
                "tgs_estimate": round(plan.tgs_estimate, 6),
            },
            "coupled": {
                "method": coupled.method,
                "g_v": coupled.g_v,
                "window": coupled.window,
                "batch_per_group": coupled.batch_per_group,
                "group_gpus": coupled.group_gpus,
                "tgs_estimate": round(coupled.tgs_estimate, 6),
            },
        },
    )
    print(
        f"decoupled plan: g_d={plan.g_d} config={plan.g_v} w={plan.window} "
        f"b={plan.batch_per_group} tgs={plan.tgs_estimate:.4f}"
    )
    print(
        f"coupled plan: config={coupled.g_v} w={coupled.window} "
        f"b={coupled.batch_per_group} tgs={coupled.tgs_estimate:.4f}"
    )
    print(f"wrote {path} and {out / 'plan.json'}")
    return EXIT_OK


# -- simulate / sweep / compare / timeline -------------------------------


def cmd_simulate(args, out: Path, cfg: ExperimentConfig, seed: int) -> int:
    model = _load_model(cfg)
    trace = _build_trace(cfg, seed)
    m = simulate(_sim_config(cfg, model, trace, seed))
    _write_json(out / "summary.json", _summary_dict(m))
    _write_csv(out / "requests.csv", _REQUEST_HEADER, _request_rows(m))
    _write_csv(out / "workers.csv", _WORKER_HEADER, _worker_rows(m))
    _write_events(out / "events.jsonl", m.events)
    print(
        f"{m.policy} seed={seed}: makespan {m.makespan_ms:.1f} ms, "
        f"{m.total_committed} tokens committed, {m.total_wasted} wasted, "
        f"mean TGS {m.mean_tgs:.4f} tok/ms"
    )
    print(f"wrote {out / 'summary.json'}")
    return EXIT_OK


def cmd_sweep(args, out: Path, cfg: ExperimentConfig, seed: int) -> int:
    model = _load_model(cfg)
    policies = (POLICY_PLAIN, POLICY_COUPLED, POLICY_DECOUPLED)
    rows = []
    for batch in cfg.sweep_batches:
        spec = scenarios.default_trace_spec(batch=batch, seed=seed)
        spec = TraceSpec(**{**spec.__dict__, "length_sigma": cfg.sweep_sigma})
        base: float | None = None
        for policy in policies:
            m = simulate(
                _sim_config(
                    cfg, model, gen_trace(spec), seed,
                    overrides={"policy": policy, "reconfig": False, "bon": False},
                )
            )
            if policy == POLICY_PLAIN:
                base = m.makespan_ms
            speedup = base / m.makespan_ms
            rows.append([batch, policy, seed, m.makespan_ms, m.mean_tgs, speedup])
            print(
                f"b={batch:>4} {policy:>10}: makespan {m.makespan_ms:>10.1f} ms "
                f"speedup {speedup:.3f}"
            )
    path = out / "sweep.csv"
    _write_csv(
        path,
        ["batch", "policy", "seed", "makespan_ms", "mean_tgs", "speedup"],
        rows,
    )
    print(f"wrote {path}")
    return EXIT_OK


def cmd_compare(args, out: Path, cfg: ExperimentConfig) -> int:
    model = _load_model(cfg)
    rows = []
    medians = {}
    reference: dict[int, dict] = {}
    for name, overrides in COMPARE_STACKS:
        spans = []
        for seed in cfg.seeds:
            trace = _build_trace(cfg, seed)
            m = simulate(_sim_config(cfg, model, trace, seed, overrides))
            if name == "plain":
                reference[seed] = m.sequences
            match = m.sequences == reference[seed]
            if not match:
                raise AssertionError(
                    f"{name} seed={seed}: committed sequences diverge from "
                    f"plain decode"
                )
            spans.append(m.makespan_ms)
            rows.append([
                name, seed, m.makespan_ms, m.mean_tgs, m.total_wasted,
                m.reconfig_count, m.bon_assign_count, int(match),
            ])
        medians[name] = statistics.median(spans)
        print(f"{name:>24}: median makespan {medians[name]:>10.1f} ms")
    path = out / "compare.csv"
    _write_csv(
        path,
        [
            "stack", "seed", "makespan_ms", "mean_tgs", "total_wasted",
            "reconfig_count", "bon_assign_count", "sequences_match_plain",
        ],
        rows,
    )
    _write_json(
        out / "compare_summary.json",
        {name: round(v, 6) for name, v in medians.items()},
    )
    print(f"wrote {path}")
    return EXIT_OK


def cmd_timeline(args, out: Path, cfg: ExperimentConfig, seed: int) -> int:
    model = _load_model(cfg)
    trace = _build_trace(cfg, seed)
    sim_cfg = _sim_config(cfg, model, trace, seed)
    sim_cfg.log_draft_events = True
    m = simulate(sim_cfg)
    _write_csv(out / "timeline.csv", _WORKER_HEADER, _worker_rows(m))
    _write_events(out / "events.jsonl", m.events)
    span = m.makespan_ms - cfg.prepare_learn_ms
    for w in sorted(m.workers.values(), key=lambda w: w.id):
        frac = w.idle_ms / span if span > 0 else 0.0
        print(
            f"{w.id:>12} ({w.role}): busy {w.busy_ms:>10.1f} ms, "
            f"idle fraction {frac:.2f}"
        )
    print(f"wrote {out / 'timeline.csv'} and {out / 'events.jsonl'}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specrollout",
        description="virtual-time speculative-decoding rollout experiments",
    )
    parser.add_argument("--config", help="experiment config JSON file")
    parser.add_argument("--seed", type=int, help="override the first config seed")
    parser.add_argument("--out", default="specrollout-out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit affine latency models from samples")
    p_fit.add_argument("--samples", required=True, help="CSV of b,latency_ms,key")
    p_fit.add_argument("--total-gpus", type=int, default=16)
    p_fit.add_argument(
        "--config-gpus", action="append", metavar="NAME=COUNT",
        help="GPU count of a verification config (default: digits in its name)",
    )

    p_ladder = sub.add_parser("ladder", help="method speedup ladder as CSV")
    p_ladder.add_argument("--methods", help="comma-separated method subset")
    p_ladder.add_argument("--grid", help="comma-separated acceptance rates")

    p_plan = sub.add_parser("plan", help="search execution plans")
    p_plan.add_argument("--batch", type=int, required=True)
    p_plan.add_argument("--rate", type=float, required=True)
    p_plan.add_argument("--method")

    sub.add_parser("simulate", help="run one simulation")
    sub.add_parser("sweep", help="batch-size sweep across policies")
    sub.add_parser("compare", help="policy-stack ablation across seeds")
    sub.add_parser("timeline", help="per-worker busy/idle timeline")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config)
        seed = args.seed if args.seed is not None else cfg.seeds[0]
        out = _out_dir(args)
        if args.command == "fit":
            return cmd_fit(args, out)
        if args.command == "ladder":
            return cmd_ladder(args, out, cfg)
        if args.command == "plan":
            return cmd_plan(args, out, cfg)
        if args.command == "simulate":
            return cmd_simulate(args, out, cfg, seed)
        if args.command == "sweep":
            return cmd_sweep(args, out, cfg, seed)
        if args.command == "compare":
            return cmd_compare(args, out, cfg)
        if args.command == "timeline":
            return cmd_timeline(args, out, cfg, seed)
        raise ConfigError(f"unknown command {args.command!r}")
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SpecRolloutError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
