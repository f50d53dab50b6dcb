"""coserve: cost-constrained device-server cooperative LLM serving.

Computes dispatch policies (wait-time schedules and length thresholds) from
endpoint performance profiles, races a device endpoint against a server
endpoint per request, migrates decode mid-stream behind a smoothing buffer,
and evaluates TTFT/TBT/cost on replayed or synthetic traces both offline
(simulator) and online (streaming gateway).
"""

from .cost import (
    ARCH_PRESETS,
    BudgetSpec,
    Constrained,
    CostRates,
    ModelArch,
    Phase,
    flops_attention_decode,
    flops_attention_prefill,
    flops_per_token_total,
    unified_request_cost,
)
from .dispatch import (
    DispatchDecision,
    ExecPlan,
    LengthDist,
    WaitSchedule,
    classify,
    decide,
    plan,
    plan_device_constrained,
    plan_server_constrained,
)
from .migration import (
    HandoffPlan,
    MigrationParams,
    buffer_target,
    migration_gain,
    schedule_handoff,
    should_migrate,
    token_id_payload,
)
from .profiles import (
    DeviceTtftModel,
    ProfileSnapshot,
    ServerTtftEcdf,
    ecdf_eval,
    ecdf_quantile,
    fit_device_linear,
    pearson,
)
from .sim import (
    EndpointModel,
    ExperimentReport,
    MigrationConfig,
    RequestOutcome,
    metrics,
    run_experiment,
    simulate_request,
)
from .workload import LogNormalSpec, Request, Trace, fit_lognormal, gen_synthetic, load_trace

__version__ = "0.1.0"
