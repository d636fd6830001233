"""Context-aware function allocation for wearable personal-area networks."""
from .allocator import (
    Assignment, FapInstance, allocate, baseline_all, baseline_manual, fap_exact, fap_greedy,
    feasibility_violations, select_master,
)
from .core import (
    Activity, ContextSnapshot, DeviceKind, DeviceProfile, EnergyCatalog, FunctionType, NetworkKind, Objective,
    ObjectiveMode, Preference, Registration, SamplingSpeed, Scope, Tier, aggregate_requests, apply_preferences,
    function_energy_per_interval, load_energy_catalog, transfer_energy,
)
from .simulator import Scenario, Trace, load_scenario, run, uptime_metrics

__version__ = "0.1.0"
