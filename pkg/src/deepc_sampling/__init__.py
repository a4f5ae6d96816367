"""Data-enabled predictive control with per-step contextual trajectory selection."""

from .trajectory_data import (
    Dataset,
    DataMatrices,
    FrameRule,
    NormalizationStats,
    Trajectory,
    TransformInfo,
    build_data_matrices,
    build_hankel,
    is_persistently_exciting,
    min_singular_value,
)
from .sampling import (
    SelectionRequest,
    SelectionResult,
    combine_distances,
    future_distances,
    past_distances,
    restrict,
    select_contextual,
    select_random,
)
from .qp_solver import QpProblem, QpSettings, QpSolution, solve, warm_started_resolve
from .deepc_controller import (
    ControllerConfig,
    ControllerState,
    DeepcController,
    StepResult,
    align_window_columns,
    assemble_qp,
    preprocess_dataset,
    tracking_error,
)
from .plants import (
    LtiPlant,
    NoiseConfig,
    QuadrotorParams,
    QuadrotorState,
    VehicleParams,
    VehicleState,
    add_measurement_noise,
    double_integrator,
    quadrotor_step,
    vehicle_step,
)
from .harness import (
    ExperimentConfig,
    FigureEight,
    RunRecord,
    StadiumTrack,
    aggregate,
    collect_excitation_data,
    default_config,
    grid_search,
    run_closed_loop,
    run_sweep,
    write_report,
)

__version__ = "0.1.0"
