"""Virtual-time simulator and scheduling library for speculative-decoding
rollout in LLM post-training."""

from .bon import BonAssignment, ClusterState, ScaleCost, assign_bon, scale_charge
from .costmodel import (
    AffineLatencyModel,
    CostModel,
    ProfileSample,
    VerifyConfig,
    accept_pmf,
    expected_tokens_coupled,
    expected_tokens_decoupled,
    fit_affine,
    iteration_latency,
    iteration_latency_coupled,
    tgs_coupled,
    tgs_decoupled,
)
from .errors import (
    ConfigError,
    InfeasiblePlanError,
    InsufficientDataError,
    MissingEntryError,
    SpecRolloutError,
    TraceFormatError,
)
from .planner import (
    CoupledPlan,
    DraftLadder,
    ExecutionPlan,
    RequestPlan,
    build_ladder,
    initial_select,
    reconfigure,
    search_plan,
    search_plan_coupled,
)
from .sim import (
    SimConfig,
    SimMetrics,
    VerificationOutcome,
    generate_true_sequence,
    simulate,
)
from .workload import (
    AcceptanceEstimator,
    Request,
    TraceSpec,
    gen_trace,
    load_trace,
    save_trace,
)

__version__ = "0.1.0"
