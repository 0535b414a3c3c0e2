"""Time-dependent resource scheduling for federated learning rounds that
coexist with high-bandwidth downlink traffic.

The package provides a session-based optimizer (fractional-programming
surrogates solved by a log-barrier interior-point method), a rigid
whole-round baseline, slot-level max-sum-rate / max-min-rate simulators,
a slot-level replay audit, and a CLI for running the comparison
experiments.
"""

from .scenario import (
    DEFAULTS,
    FlWorkload,
    RadioConstants,
    Scenario,
    ScenarioError,
    ScenarioFormatError,
    UeRecord,
    dbm_to_watt,
    freespace_gain_sq,
    generate,
    load,
    save,
)
from .ratemodel import (
    compute_energy,
    compute_energy_from_time,
    compute_time,
    dl_rate,
    dl_rate_per_rb,
    min_compute_time,
    round_latency,
    ul_rate,
)
from .convexcore import (
    INFEASIBLE,
    MAX_ITER,
    OPTIMAL,
    ConvexProgram,
    SolveOptions,
    SolveReport,
    check_derivatives,
    solve,
)

__version__ = "0.1.0"
