"""gridshaper: two-stage predictive load shaping and voltage control for
radial distribution feeders, with plug-and-play admission of flexible loads."""

from .assets import (
    BatteryBank,
    DeferrableLoad,
    EnvelopeViolation,
    Fleet,
    ShapeableLoad,
    shifted_profile,
    shp_soc_min,
    step_soc,
)
from .conic import (
    ConicProgram,
    SolverFailure,
    SolverReport,
    check_relaxation_exactness,
    solve,
)
from .controller import (
    ConfigurationError,
    ControllerWeights,
    DegenerateTailError,
    HorizonConfig,
    HeadroomReport,
    MpcSolution,
    PriceSignal,
    ProtocolViolation,
    ReferenceTrajectory,
    SystemState,
    TerminalSet,
    build_terminal_set,
    check_headroom_conditions,
    construct_shifted_candidate,
    solve_stage1,
    solve_stage2,
    try_stage2,
    verify_candidate,
)
from .network import (
    Bus,
    DistFlowDivergence,
    FixedLoadForecast,
    FlowSolution,
    Line,
    NetworkModel,
    distflow_residuals,
    load_network,
    random_radial_network,
    save_network,
    solve_exact_distflow,
    validate_topology,
)
from .pnp import AdmissionDecision, PlugRequest, admit, apply_decision
from .scenario import (
    ControllerConfig,
    Scenario,
    generate_scenario,
    load_config,
    load_scenario,
    save_scenario,
)
from .simulate import Metrics, SimulationTrace, export_trace, run, uncontrolled_baseline

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # network
    "Bus",
    "Line",
    "FixedLoadForecast",
    "NetworkModel",
    "FlowSolution",
    "DistFlowDivergence",
    "validate_topology",
    "solve_exact_distflow",
    "distflow_residuals",
    "random_radial_network",
    "load_network",
    "save_network",
    # assets
    "ShapeableLoad",
    "DeferrableLoad",
    "BatteryBank",
    "Fleet",
    "EnvelopeViolation",
    "shp_soc_min",
    "step_soc",
    "shifted_profile",
    # conic
    "ConicProgram",
    "SolverReport",
    "SolverFailure",
    "solve",
    "check_relaxation_exactness",
    # controller
    "HorizonConfig",
    "ControllerWeights",
    "PriceSignal",
    "ReferenceTrajectory",
    "TerminalSet",
    "SystemState",
    "MpcSolution",
    "HeadroomReport",
    "ConfigurationError",
    "DegenerateTailError",
    "ProtocolViolation",
    "solve_stage1",
    "solve_stage2",
    "try_stage2",
    "build_terminal_set",
    "check_headroom_conditions",
    "construct_shifted_candidate",
    "verify_candidate",
    # plug-and-play
    "PlugRequest",
    "AdmissionDecision",
    "admit",
    "apply_decision",
    # scenario / simulation
    "ControllerConfig",
    "Scenario",
    "load_config",
    "load_scenario",
    "save_scenario",
    "generate_scenario",
    "run",
    "uncontrolled_baseline",
    "export_trace",
    "Metrics",
    "SimulationTrace",
]
